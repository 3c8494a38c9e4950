//! Non-autoregressive sequence-to-sequence conversion: encoder, learned
//! aligner, duration predictor and decoder, trained with a reconstruction
//! loss, a forward-sum alignment loss and a duration loss.

mod checkpoint;
mod fsum;
pub(crate) mod nn;
mod model;
mod phase;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Architecture, Checkpoint, GroupState, PhaseRecord,
    TensorBlob, CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC,
};
pub use model::{round_durations, S2sModel};
pub use nn::ParamStore;
pub use phase::{load_pairs, run_phase, Phase, PhaseConfig, PhaseOutcome};
pub use train::{
    gradient_norms, pad_target, smoothed, LossBreakdown, TrainConfig, Trainer, TrainingPair,
};

use crate::alignkit::AlignError;
use crate::data::DataError;

#[derive(Debug, thiserror::Error)]
pub enum S2sError {
    #[error("feature dim {actual} does not match the model's {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("phase `{phase}` violates its invariants: {reason}")]
    PhaseInvariant { phase: Phase, reason: String },
    #[error("phase `{phase}` needs a checkpoint produced by `{needs}`")]
    MissingPrerequisite { phase: Phase, needs: Phase },
    #[error("non-finite loss at step {step}: recon={recon} forward_sum={forward_sum} duration={duration}")]
    NonFiniteLoss {
        step: usize,
        recon: f64,
        forward_sum: f64,
        duration: f64,
    },
    #[error("no training pairs")]
    NoData,
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("checkpoint {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("fingerprint mismatch for group `{group}`: stored {stored}, computed {computed}")]
    FingerprintMismatch {
        group: ParamGroup,
        stored: String,
        computed: String,
    },
    #[error("checkpoint I/O at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    DurationPredictor,
    Alignment,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::Decoder,
        ParamGroup::DurationPredictor,
        ParamGroup::Alignment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Decoder => "decoder",
            ParamGroup::DurationPredictor => "duration_predictor",
            ParamGroup::Alignment => "alignment",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = S2sError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| S2sError::Config(format!("unknown parameter group `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub forward_sum: f64,
    pub duration: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            forward_sum: 1.0,
            duration: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub source_dim: usize,
    pub target_dim: usize,
    pub hidden_dim: usize,
    pub num_encoder_blocks: usize,
    pub num_decoder_blocks: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    pub loss_weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            source_dim: 768,
            target_dim: 80,
            hidden_dim: 128,
            num_encoder_blocks: 2,
            num_decoder_blocks: 2,
            attention_heads: 2,
            dropout: 0.1,
            loss_weights: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), S2sError> {
        let bad = |m: String| Err(S2sError::Config(m));
        if self.source_dim == 0 || self.target_dim == 0 || self.hidden_dim == 0 {
            return bad("dims must be positive".into());
        }
        if self.attention_heads == 0 || self.hidden_dim % self.attention_heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.attention_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let w = &self.loss_weights;
        for (name, v) in [("recon", w.recon), ("forward_sum", w.forward_sum), ("duration", w.duration)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("loss weight {name} = {v} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}
