//! Embedder backends keyed by kind.
//!
//! Only the log-mel analyser and the seeded pseudo-embedder ship with the
//! crate. Large pretrained models (self-supervised encoders, phoneme
//! recognizers) plug in through [`EmbedderBackend`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{extract_mel, pseudo::pseudo_embed_with, FeatureError, MelConfig, Waveform};
use crate::data::{FeatureKind, FeatureSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Mel,
    S3r,
    PpgBnf,
    Pseudo,
}

impl EmbedderKind {
    pub fn feature_kind(self) -> FeatureKind {
        match self {
            EmbedderKind::Mel => FeatureKind::Mel,
            EmbedderKind::S3r => FeatureKind::S3r,
            EmbedderKind::PpgBnf => FeatureKind::PpgBnf,
            EmbedderKind::Pseudo => FeatureKind::Other,
        }
    }

    pub fn from_feature_kind(kind: FeatureKind) -> Option<Self> {
        match kind {
            FeatureKind::Mel => Some(EmbedderKind::Mel),
            FeatureKind::S3r => Some(EmbedderKind::S3r),
            FeatureKind::PpgBnf => Some(EmbedderKind::PpgBnf),
            FeatureKind::Other => None,
        }
    }
}

impl fmt::Display for EmbedderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedderKind::Mel => "mel",
            EmbedderKind::S3r => "s3r",
            EmbedderKind::PpgBnf => "ppg_bnf",
            EmbedderKind::Pseudo => "pseudo",
        })
    }
}

impl std::str::FromStr for EmbedderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            EmbedderKind::Mel,
            EmbedderKind::S3r,
            EmbedderKind::PpgBnf,
            EmbedderKind::Pseudo,
        ]
        .into_iter()
        .find(|k| k.to_string() == s)
        .ok_or_else(|| format!("unknown embedder kind `{s}` (mel, s3r, ppg_bnf or pseudo)"))
    }
}

/// Layer whose hidden states the self-supervised backend returns by default.
pub const DEFAULT_S3R_LAYER: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    #[serde(default)]
    pub layer_index: Option<usize>,
    pub output_dim: usize,
    pub stride_ms: f64,
}

impl EmbedderSpec {
    pub fn for_kind(kind: EmbedderKind) -> Self {
        let output_dim = match kind {
            EmbedderKind::Mel => 80,
            EmbedderKind::S3r => 768,
            EmbedderKind::PpgBnf => 144,
            EmbedderKind::Pseudo => 64,
        };
        Self {
            kind,
            layer_index: (kind == EmbedderKind::S3r).then_some(DEFAULT_S3R_LAYER),
            output_dim,
            stride_ms: 20.0,
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.output_dim == 0 {
            return Err(FeatureError::Config("output_dim must be positive".into()));
        }
        if !(self.stride_ms > 0.0) {
            return Err(FeatureError::Config("stride must be positive".into()));
        }
        if let Some(dim) = self.kind.feature_kind().default_dim() {
            if dim != self.output_dim {
                return Err(FeatureError::Config(format!(
                    "{} embeddings are {dim}-dimensional, spec asks for {}",
                    self.kind, self.output_dim
                )));
            }
        }
        Ok(())
    }
}

pub trait EmbedderBackend: Send + Sync {
    fn id(&self) -> &str;

    fn embed(&self, w: &Waveform, spec: &EmbedderSpec) -> Result<FeatureSequence, FeatureError>;

    /// Backends that cannot take concurrent calls return false; the registry
    /// then serializes access.
    fn concurrent(&self) -> bool {
        true
    }
}

pub struct MelBackend {
    pub config: MelConfig,
}

impl EmbedderBackend for MelBackend {
    fn id(&self) -> &str {
        "mel"
    }

    fn embed(&self, w: &Waveform, _spec: &EmbedderSpec) -> Result<FeatureSequence, FeatureError> {
        extract_mel(w, &self.config)
    }
}

pub struct PseudoBackend {
    pub seed: u64,
    pub mel: MelConfig,
}

impl PseudoBackend {
    /// Distinct layers of the stand-in get distinct projections.
    fn effective_seed(&self, spec: &EmbedderSpec) -> u64 {
        self.seed ^ (spec.layer_index.unwrap_or(0) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}

impl EmbedderBackend for PseudoBackend {
    fn id(&self) -> &str {
        "pseudo"
    }

    fn embed(&self, w: &Waveform, spec: &EmbedderSpec) -> Result<FeatureSequence, FeatureError> {
        pseudo_embed_with(
            w,
            spec.output_dim,
            self.effective_seed(spec),
            &self.mel,
            spec.kind.feature_kind(),
        )
    }
}

/// One `kind -> backend` line of the adapter configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendEntry {
    /// `mel`, `pseudo`, or an external backend identifier.
    pub backend: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub layer_index: Option<usize>,
}

/// The adapter configuration file: embedders, vocoder and MOS predictor.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    #[serde(default)]
    pub embedders: BTreeMap<EmbedderKind, BackendEntry>,
    #[serde(default)]
    pub vocoder: Option<BackendEntry>,
    #[serde(default)]
    pub mos: Option<BackendEntry>,
}

impl AdapterConfig {
    /// Desk-scale defaults: pseudo stand-ins for both learned embedders.
    pub fn desk_defaults() -> Self {
        let pseudo = |seed| BackendEntry {
            backend: "pseudo".into(),
            checkpoint: None,
            seed: Some(seed),
            layer_index: None,
        };
        Self {
            embedders: [
                (
                    EmbedderKind::S3r,
                    BackendEntry {
                        layer_index: Some(DEFAULT_S3R_LAYER),
                        ..pseudo(768)
                    },
                ),
                (EmbedderKind::PpgBnf, pseudo(144)),
            ]
            .into_iter()
            .collect(),
            vocoder: None,
            mos: None,
        }
    }
}

struct Slot {
    backend: Arc<dyn EmbedderBackend>,
    gate: Option<Mutex<()>>,
}

pub struct EmbedderRegistry {
    mel: MelConfig,
    slots: BTreeMap<EmbedderKind, Slot>,
    layers: BTreeMap<EmbedderKind, usize>,
}

impl EmbedderRegistry {
    /// Registry holding only the log-mel analyser.
    pub fn new(mel: MelConfig) -> Self {
        let mut registry = Self {
            mel: mel.clone(),
            slots: BTreeMap::new(),
            layers: BTreeMap::new(),
        };
        registry.register(EmbedderKind::Mel, Arc::new(MelBackend { config: mel }));
        registry
    }

    pub fn from_config(mel: MelConfig, config: &AdapterConfig) -> Result<Self, FeatureError> {
        let mut registry = Self::new(mel.clone());
        for (kind, entry) in &config.embedders {
            let backend: Arc<dyn EmbedderBackend> = match entry.backend.as_str() {
                "mel" => Arc::new(MelBackend { config: mel.clone() }),
                "pseudo" => Arc::new(PseudoBackend {
                    seed: entry.seed.unwrap_or(0),
                    mel: mel.clone(),
                }),
                other => {
                    return Err(FeatureError::ModelLoad {
                        model: format!(
                            "{other}:{}",
                            entry
                                .checkpoint
                                .as_ref()
                                .map(|p| p.display().to_string())
                                .unwrap_or_default()
                        ),
                        reason: "no runtime for external embedders is linked into this build; \
                                 register an EmbedderBackend programmatically"
                            .into(),
                    })
                }
            };
            registry.register(*kind, backend);
            if let Some(layer) = entry.layer_index {
                registry.layers.insert(*kind, layer);
            }
        }
        Ok(registry)
    }

    pub fn register(&mut self, kind: EmbedderKind, backend: Arc<dyn EmbedderBackend>) {
        let gate = (!backend.concurrent()).then(|| Mutex::new(()));
        self.slots.insert(kind, Slot { backend, gate });
    }

    pub fn mel_config(&self) -> &MelConfig {
        &self.mel
    }

    pub fn has(&self, kind: EmbedderKind) -> bool {
        self.slots.contains_key(&kind)
    }

    /// The spec the registry would use for `kind`, including a configured
    /// layer index.
    pub fn spec_for(&self, kind: EmbedderKind) -> EmbedderSpec {
        let mut spec = EmbedderSpec::for_kind(kind);
        spec.stride_ms = self.mel.stride_ms;
        if let Some(layer) = self.layers.get(&kind) {
            spec.layer_index = Some(*layer);
        }
        spec
    }

    pub fn embed(&self, w: &Waveform, spec: &EmbedderSpec) -> Result<FeatureSequence, FeatureError> {
        spec.validate()?;
        let slot = self
            .slots
            .get(&spec.kind)
            .ok_or(FeatureError::MissingBackend(spec.kind))?;
        let out = match &slot.gate {
            Some(gate) => {
                let _guard = gate.lock().unwrap_or_else(|p| p.into_inner());
                slot.backend.embed(w, spec)?
            }
            None => slot.backend.embed(w, spec)?,
        };
        if out.dim() != spec.output_dim {
            return Err(FeatureError::Backend {
                backend: slot.backend.id().to_string(),
                reason: format!("returned dim {}, expected {}", out.dim(), spec.output_dim),
            });
        }
        Ok(out)
    }
}
