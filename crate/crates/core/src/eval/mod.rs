//! Linguistic-similarity and naturalness scoring of converted speech.

mod adapters;
mod metrics;
mod report;

pub use adapters::{
    mos_from_entry, Asr, ExternalAsr, ExternalMos, FrameEmbedder, MockAsr, MockMos, MosPredictor,
    ProjectionEmbedder,
};
pub use metrics::{edit_counts, normalize_text, s1_wer, speech_bert_score, tokenize, EditCounts, Tokenizer};
pub use report::{
    EvalAggregates, EvalOutput, EvalReport, EvalRow, Evaluator, FailedUtterance, TranscriptProvider,
    TABLE_HEADERS,
};

use crate::data::{DataError, Role};
use crate::features::FeatureError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("reference transcript is empty after normalization")]
    EmptyReference,
    #[error("feature dims differ: generated {generated}, reference {reference}")]
    DimMismatch { generated: usize, reference: usize },
    #[error("backend `{backend}` failed: {cause}")]
    Backend { backend: String, cause: String },
    #[error("utterance `{id}` has no {role} transcript in the manifest")]
    MissingTranscript { id: String, role: Role },
    #[error("utterance `{0}` has no L1_S1 reference features")]
    MissingReference(String),
    #[error("evaluation configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Data(#[from] DataError),
}
