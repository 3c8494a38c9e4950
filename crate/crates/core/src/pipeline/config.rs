use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::alignkit::{Metric, ThresholdRule};
use crate::data::{Split, SyntheticConfig};
use crate::eval::TranscriptProvider;
use crate::features::{AdapterConfig, BackendEntry, MelConfig};
use crate::s2s::{ModelConfig, Phase, PhaseConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub feature_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl PathsConfig {
    /// All paths under one working directory, in the desk layout.
    pub fn under(root: impl AsRef<Path>) -> Self {
        let root = root.as_ref();
        Self {
            manifest: root.join("data/manifest.jsonl"),
            feature_dir: root.join("data/features"),
            checkpoint_dir: root.join("checkpoints"),
            output_dir: root.join("outputs"),
            report_dir: root.join("reports"),
        }
    }

    /// Directory holding the manifest, the ground truth and the codebook.
    pub fn data_dir(&self) -> &Path {
        self.manifest.parent().unwrap_or(Path::new("."))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// PPG-to-Spec checkpoint; required for ppg_bnf conversion targets.
    pub ppg_to_spec: Option<PathBuf>,
    pub griffin_lim_iterations: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            ppg_to_spec: None,
            griffin_lim_iterations: crate::synth::DEFAULT_GRIFFIN_LIM_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSetting {
    /// `pseudo`, or an external backend id.
    pub backend: String,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedderSetting {
    fn default() -> Self {
        Self {
            backend: "pseudo".into(),
            dim: 256,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub split: Split,
    pub transcripts: TranscriptProvider,
    /// Hypothesis recognizer. `mock` reads its codebook from `checkpoint`,
    /// by default `codebook.vshd` beside the manifest.
    pub asr: BackendEntry,
    pub embedder: EmbedderSetting,
    /// Score synthesized audio with the configured MOS predictor.
    pub mos: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            split: Split::Test,
            transcripts: TranscriptProvider::OracleManifest,
            asr: BackendEntry {
                backend: "mock".into(),
                checkpoint: None,
                seed: None,
                layer_index: None,
            },
            embedder: EmbedderSetting::default(),
            mos: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSettings {
    pub metric: Metric,
    pub threshold: ThresholdRule,
}

/// The whole pipeline configuration. Every seed used by a command is
/// derived from `seed`; seed fields inside the sub-tables are overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub mel: MelConfig,
    #[serde(default = "AdapterConfig::desk_defaults")]
    pub adapters: AdapterConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_phases")]
    pub phases: Vec<PhaseConfig>,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub align: AlignSettings,
}

fn default_phases() -> Vec<PhaseConfig> {
    Phase::ALL.into_iter().map(PhaseConfig::preset).collect()
}

impl PipelineConfig {
    /// Desk defaults with every path under `root`.
    pub fn desk(root: impl AsRef<Path>, seed: u64) -> Self {
        Self {
            seed,
            paths: PathsConfig::under(root),
            mel: MelConfig::default(),
            adapters: AdapterConfig::desk_defaults(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            phases: default_phases(),
            synthetic: SyntheticConfig::default(),
            synthesis: SynthesisConfig::default(),
            eval: EvalSettings::default(),
            align: AlignSettings::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let config: Self =
            toml::from_str(text).map_err(|e| PipelineError::Config(format!("parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("pipeline config serializes")
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.mel.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let mut seen = BTreeSet::new();
        for (k, phase) in self.phases.iter().enumerate() {
            phase.validate()?;
            if !seen.insert(phase.phase.as_str()) {
                return Err(PipelineError::Config(format!("phase {} listed twice", phase.phase)));
            }
            if let Some(needs) = phase.phase.prerequisite() {
                if !self.phases[..k].iter().any(|p| p.phase == needs) {
                    return Err(PipelineError::Config(format!(
                        "phase {} must come after {}",
                        phase.phase, needs
                    )));
                }
            }
        }
        if self.synthesis.griffin_lim_iterations == 0 {
            return Err(PipelineError::Config("griffin_lim_iterations must be positive".into()));
        }
        if self.eval.embedder.dim == 0 {
            return Err(PipelineError::Config("eval embedder dim must be positive".into()));
        }
        if self.synthetic.dim != self.mel.n_mels {
            return Err(PipelineError::Config(format!(
                "synthetic dim {} differs from n_mels {}",
                self.synthetic.dim, self.mel.n_mels
            )));
        }
        Ok(())
    }

    /// The configured setup of `phase`, or its preset when the config does
    /// not list it.
    pub fn phase(&self, phase: Phase) -> PhaseConfig {
        self.phases
            .iter()
            .find(|p| p.phase == phase)
            .cloned()
            .unwrap_or_else(|| PhaseConfig::preset(phase))
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.seed,
            ..self.synthetic.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn codebook_path(&self) -> PathBuf {
        self.eval
            .asr
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.data_dir().join("codebook.vshd"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = PipelineConfig::desk("work", 3);
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn minimal_file_gets_desk_defaults() {
        let c = PipelineConfig::from_toml(
            r#"
seed = 1
[paths]
manifest = "m.jsonl"
feature_dir = "f"
checkpoint_dir = "c"
output_dir = "o"
report_dir = "r"
"#,
        )
        .unwrap();
        assert_eq!(c.phases.len(), 5);
        assert!(c.adapters.embedders.contains_key(&crate::features::EmbedderKind::S3r));
    }

    #[test]
    fn stage_two_before_stage_one_is_rejected() {
        let mut c = PipelineConfig::desk("w", 0);
        c.phases = vec![
            PhaseConfig::preset(Phase::DecFtStage2),
            PhaseConfig::preset(Phase::DecFtStage1),
        ];
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("dec_ft_stage1"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = PipelineConfig::desk("w", 0).to_toml();
        text.push_str("\n[bogus]\nx = 1\n");
        assert!(PipelineConfig::from_toml(&text).is_err());
    }
}
