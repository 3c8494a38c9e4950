//! Turning converted features into audio.

mod ppg_to_spec;
mod vocoder;

pub use ppg_to_spec::{PpgToSpec, SpecPair, MEL_DIM, PPG_DIM};
pub use vocoder::{
    vocoder_from_entry, ExternalVocoder, GriffinLim, Vocoder, DEFAULT_GRIFFIN_LIM_ITERATIONS,
};

use crate::data::{DataError, FeatureKind, FeatureSequence};
use crate::features::{FeatureError, Waveform};
use crate::s2s::S2sError;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("input dim {actual}, expected {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("a ppg_bnf conversion target needs a PPG-to-Spec decoder")]
    MissingDecoder,
    #[error("vocoder backend `{backend}` failed: {cause}")]
    Backend { backend: String, cause: String },
    #[error("synthesis configuration: {0}")]
    Config(String),
    #[error("no training pairs")]
    NoData,
    #[error(transparent)]
    Model(#[from] S2sError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
}

/// Converted features to waveform: optional PPG-to-Spec step, then a
/// vocoder.
pub struct SynthesisChain {
    pub ppg_to_spec: Option<PpgToSpec>,
    pub vocoder: Box<dyn Vocoder>,
}

impl SynthesisChain {
    /// Checks that the chain can render features of `target`.
    pub fn validate(&self, target: FeatureKind) -> Result<(), SynthError> {
        match target {
            FeatureKind::Mel => Ok(()),
            FeatureKind::PpgBnf if self.ppg_to_spec.is_some() => Ok(()),
            FeatureKind::PpgBnf => Err(SynthError::MissingDecoder),
            other => Err(SynthError::Config(format!("cannot synthesize {other} features"))),
        }
    }

    /// Mel frames the vocoder will see for `features`.
    pub fn to_mel(&self, features: &FeatureSequence) -> Result<FeatureSequence, SynthError> {
        self.validate(features.kind())?;
        match (&self.ppg_to_spec, features.kind()) {
            (Some(decoder), FeatureKind::PpgBnf) => decoder.infer(features),
            _ => Ok(features.clone()),
        }
    }

    pub fn synthesize(&self, features: &FeatureSequence) -> Result<Waveform, SynthError> {
        let mel = self.to_mel(features)?;
        self.vocoder.vocode(&mel)
    }
}
