//! Waveform to feature-sequence extraction.

mod mel;
pub mod pseudo;
mod registry;
mod wav;

use std::path::PathBuf;

pub use mel::{extract_mel, hz_to_mel, mel_to_hz, MelConfig, MelFilterbank};
pub(crate) use mel::Stft;
pub use pseudo::{project_mel, pseudo_embed};
pub use registry::{
    AdapterConfig, BackendEntry, EmbedderBackend, EmbedderKind, EmbedderRegistry, EmbedderSpec,
    MelBackend, PseudoBackend, DEFAULT_S3R_LAYER,
};
pub use wav::{read_wav, write_wav, Waveform};

use crate::data::DataError;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("waveform has {samples} samples, shorter than one {window}-sample analysis window")]
    TooShort { samples: usize, window: usize },
    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },
    #[error("no backend registered for embedder kind `{0}`")]
    MissingBackend(EmbedderKind),
    #[error("failed to load external model `{model}`: {reason}")]
    ModelLoad { model: String, reason: String },
    #[error("backend `{backend}` failed: {reason}")]
    Backend { backend: String, reason: String },
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("invalid feature configuration: {0}")]
    Config(String),
    #[error("wave file {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}
