//! The training regimes: one-step mapping and the two-stage encoder and
//! decoder fine-tuning schedules.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::nn::feature_stats;
use super::train::{LossBreakdown, TrainConfig, Trainer, TrainingPair};
use super::{Checkpoint, ModelConfig, ParamGroup, PhaseRecord, S2sError, S2sModel};
use crate::data::{feature_path, read_feature_container, FeatureKind, Manifest, Role, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    OneStep,
    EncFtStage1,
    EncFtStage2,
    DecFtStage1,
    DecFtStage2,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::OneStep,
        Phase::EncFtStage1,
        Phase::EncFtStage2,
        Phase::DecFtStage1,
        Phase::DecFtStage2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::OneStep => "one_step",
            Phase::EncFtStage1 => "enc_ft_stage1",
            Phase::EncFtStage2 => "enc_ft_stage2",
            Phase::DecFtStage1 => "dec_ft_stage1",
            Phase::DecFtStage2 => "dec_ft_stage2",
        }
    }

    /// The phase whose checkpoint this one starts from.
    pub fn prerequisite(self) -> Option<Phase> {
        match self {
            Phase::EncFtStage2 => Some(Phase::EncFtStage1),
            Phase::DecFtStage2 => Some(Phase::DecFtStage1),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = S2sError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| S2sError::Config(format!("unknown phase `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub source_role: Role,
    pub source_feature: FeatureKind,
    pub target_role: Role,
    pub target_feature: FeatureKind,
    #[serde(default)]
    pub frozen_groups: BTreeSet<ParamGroup>,
}

impl PhaseConfig {
    /// Standard setup of each phase. Stage-2 phases also freeze the duration
    /// predictor; drop it from `frozen_groups` to fine-tune it.
    pub fn preset(phase: Phase) -> Self {
        let frozen = |gs: &[ParamGroup]| gs.iter().copied().collect::<BTreeSet<_>>();
        let (source_role, source_feature, target_role, frozen_groups) = match phase {
            Phase::OneStep => (Role::L2R, FeatureKind::S3r, Role::L1SS, frozen(&[])),
            Phase::EncFtStage1 => (Role::L1SS, FeatureKind::PpgBnf, Role::L1S1, frozen(&[])),
            Phase::EncFtStage2 => (
                Role::L2R,
                FeatureKind::S3r,
                Role::L1S1,
                frozen(&[ParamGroup::Decoder, ParamGroup::DurationPredictor]),
            ),
            Phase::DecFtStage1 => (Role::L2R, FeatureKind::S3r, Role::L1SS, frozen(&[])),
            Phase::DecFtStage2 => (
                Role::L2R,
                FeatureKind::S3r,
                Role::L1S1,
                frozen(&[ParamGroup::Encoder, ParamGroup::DurationPredictor]),
            ),
        };
        Self {
            phase,
            source_role,
            source_feature,
            target_role,
            target_feature: FeatureKind::Mel,
            frozen_groups,
        }
    }

    pub fn validate(&self) -> Result<(), S2sError> {
        let fail = |reason: String| {
            Err(S2sError::PhaseInvariant {
                phase: self.phase,
                reason,
            })
        };
        if !matches!(self.source_role, Role::L2R | Role::L1SS) {
            return fail(format!("source role {} is not L2_R or L1_SS", self.source_role));
        }
        if !matches!(self.target_role, Role::L1S1 | Role::L1SS) {
            return fail(format!("target role {} is not L1_S1 or L1_SS", self.target_role));
        }
        if !matches!(self.target_feature, FeatureKind::Mel | FeatureKind::PpgBnf) {
            return fail(format!(
                "target feature {} is not supported (mel or ppg_bnf)",
                self.target_feature
            ));
        }
        if self.frozen_groups.len() == ParamGroup::ALL.len() {
            return fail("every parameter group is frozen".into());
        }
        let frozen = |g| self.frozen_groups.contains(&g);
        match self.phase {
            Phase::OneStep => {}
            Phase::EncFtStage1 => {
                if self.source_role != Role::L1SS || self.target_role != Role::L1S1 {
                    return fail("must map L1_SS to L1_S1".into());
                }
                if self.source_feature != FeatureKind::PpgBnf {
                    return fail("source feature must be ppg_bnf".into());
                }
                if !self.frozen_groups.is_empty() {
                    return fail("no group may be frozen".into());
                }
            }
            Phase::EncFtStage2 => {
                if self.source_role != Role::L2R {
                    return fail("source role must be L2_R".into());
                }
                if !frozen(ParamGroup::Decoder) {
                    return fail("decoder must be frozen".into());
                }
                if frozen(ParamGroup::Encoder) {
                    return fail("the rebuilt encoder cannot be frozen".into());
                }
            }
            Phase::DecFtStage1 => {
                if self.target_role != Role::L1SS {
                    return fail("target role must be L1_SS".into());
                }
            }
            Phase::DecFtStage2 => {
                if self.target_role != Role::L1S1 {
                    return fail("target role must be L1_S1".into());
                }
                if !frozen(ParamGroup::Encoder) {
                    return fail("encoder must be frozen".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossBreakdown>,
    pub changed_groups: Vec<ParamGroup>,
}

/// Reads the (source, target) feature pairs a phase trains on.
pub fn load_pairs(
    manifest: &Manifest,
    feature_dir: &Path,
    phase: &PhaseConfig,
    split: Split,
) -> Result<Vec<TrainingPair>, S2sError> {
    manifest
        .split(split)
        .map(|r| {
            let id = &r.utterance_id;
            let src = read_feature_container(feature_path(
                feature_dir,
                id,
                phase.source_role,
                phase.source_feature,
            ))?;
            let tgt = read_feature_container(feature_path(
                feature_dir,
                id,
                phase.target_role,
                phase.target_feature,
            ))?;
            TrainingPair::new(id.clone(), src, tgt)
        })
        .collect()
}

fn check_pairs(phase: &PhaseConfig, pairs: &[TrainingPair]) -> Result<(usize, usize), S2sError> {
    let first = pairs.first().ok_or(S2sError::NoData)?;
    let dims = (first.src.dim(), first.tgt.dim());
    for p in pairs {
        if (p.src.dim(), p.tgt.dim()) != dims {
            return Err(S2sError::DimMismatch {
                expected: dims.0,
                actual: p.src.dim(),
            });
        }
        if p.src.kind() != phase.source_feature || p.tgt.kind() != phase.target_feature {
            return Err(S2sError::PhaseInvariant {
                phase: phase.phase,
                reason: format!(
                    "pair {} holds {} -> {}, phase expects {} -> {}",
                    p.id,
                    p.src.kind(),
                    p.tgt.kind(),
                    phase.source_feature,
                    phase.target_feature
                ),
            });
        }
    }
    Ok(dims)
}

fn fit_source_stats(model: &mut S2sModel, pairs: &[TrainingPair]) -> Result<(), S2sError> {
    let (mean, std) = feature_stats(pairs.iter().map(|p| p.src.data()), model.config().source_dim);
    model.set_stats(ParamGroup::Encoder, mean, std)
}

fn fit_target_stats(model: &mut S2sModel, pairs: &[TrainingPair]) -> Result<(), S2sError> {
    let (mean, std) = feature_stats(pairs.iter().map(|p| p.tgt.data()), model.config().target_dim);
    model.set_stats(ParamGroup::Decoder, mean, std)
}

/// Trains one phase and returns the resulting checkpoint.
///
/// `template` supplies the architecture; its feature dims are taken from the
/// data. Stage-2 phases start from `init`, which must come from the matching
/// stage-1 phase. One-step and stage-1 phases start from `init` when given
/// and from fresh weights otherwise.
pub fn run_phase(
    phase: &PhaseConfig,
    template: &ModelConfig,
    train: &TrainConfig,
    pairs: &[TrainingPair],
    init: Option<&Checkpoint>,
) -> Result<PhaseOutcome, S2sError> {
    phase.validate()?;
    train.validate()?;
    if let Some(needs) = phase.phase.prerequisite() {
        match init {
            Some(c) if c.last_phase() == Some(needs) => {}
            _ => {
                return Err(S2sError::MissingPrerequisite {
                    phase: phase.phase,
                    needs,
                })
            }
        }
    }
    let (source_dim, target_dim) = check_pairs(phase, pairs)?;

    let mut rebuilt = Vec::new();
    let mut model = match init {
        Some(ckpt) => {
            let mut model = ckpt.to_model()?;
            if model.config().target_dim != target_dim {
                return Err(S2sError::DimMismatch {
                    expected: model.config().target_dim,
                    actual: target_dim,
                });
            }
            if phase.phase == Phase::EncFtStage2 {
                model.rebuild_encoder(source_dim, train.seed)?;
                fit_source_stats(&mut model, pairs)?;
                rebuilt.push(ParamGroup::Encoder);
            } else if model.config().source_dim != source_dim {
                return Err(S2sError::DimMismatch {
                    expected: model.config().source_dim,
                    actual: source_dim,
                });
            }
            model
        }
        None => {
            let config = ModelConfig {
                source_dim,
                target_dim,
                ..template.clone()
            };
            let mut model = S2sModel::new(config, train.seed)?;
            fit_source_stats(&mut model, pairs)?;
            fit_target_stats(&mut model, pairs)?;
            model
        }
    };
    let before = Checkpoint::from_model(&model, 0, vec![], None)?.fingerprints();

    log::info!(
        "phase {}: {} {} -> {} {}, frozen {:?}, {} pairs, {} steps",
        phase.phase,
        phase.source_role,
        phase.source_feature,
        phase.target_role,
        phase.target_feature,
        phase.frozen_groups,
        pairs.len(),
        train.steps
    );
    let mut trainer = Trainer::new(model, phase.frozen_groups.clone(), train.clone())?;
    let history = trainer.fit(pairs)?;
    model = trainer.into_model();

    let mut phases = init.map(|c| c.phases.clone()).unwrap_or_default();
    let prior_step = init.map(|c| c.step).unwrap_or(0);
    let probe = Checkpoint::from_model(&model, 0, vec![], None)?;
    let mut changed_groups: Vec<ParamGroup> = ParamGroup::ALL
        .into_iter()
        .filter(|g| rebuilt.contains(g) || probe.fingerprint(*g) != before.get(g).map(String::as_str))
        .collect();
    changed_groups.sort();
    phases.push(PhaseRecord {
        phase: phase.phase,
        steps: train.steps,
        changed_groups: changed_groups.clone(),
    });
    let checkpoint = Checkpoint::from_model(&model, prior_step + train.steps as u64, phases, init)?;
    Ok(PhaseOutcome {
        checkpoint,
        history,
        changed_groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSequence;
    use ndarray::Array2;

    fn seq(t: usize, kind: FeatureKind, salt: f32) -> FeatureSequence {
        let d = kind.default_dim().unwrap();
        FeatureSequence::new(
            Array2::from_shape_fn((t, d), |(i, j)| ((i * 3 + j) as f32 * 0.05 + salt).sin()),
            20.0,
            kind,
        )
        .unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            num_encoder_blocks: 1,
            num_decoder_blocks: 1,
            attention_heads: 2,
            ..ModelConfig::default()
        }
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            steps: 2,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    fn pairs(src: FeatureKind, n: usize) -> Vec<TrainingPair> {
        (0..n)
            .map(|k| {
                TrainingPair::new(
                    format!("u{k}"),
                    seq(5 + k, src, k as f32),
                    seq(8 + k, FeatureKind::Mel, k as f32 * 0.5),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn presets_are_valid() {
        for p in Phase::ALL {
            PhaseConfig::preset(p).validate().unwrap();
        }
    }

    #[test]
    fn invariant_violations() {
        let mut c = PhaseConfig::preset(Phase::EncFtStage1);
        c.frozen_groups.insert(ParamGroup::Alignment);
        assert!(c.validate().is_err());

        let mut c = PhaseConfig::preset(Phase::EncFtStage2);
        c.frozen_groups.remove(&ParamGroup::Decoder);
        assert!(c.validate().is_err());

        let mut c = PhaseConfig::preset(Phase::DecFtStage2);
        c.frozen_groups.clear();
        assert!(c.validate().is_err());

        let mut c = PhaseConfig::preset(Phase::DecFtStage1);
        c.target_role = Role::L1S1;
        assert!(c.validate().is_err());

        let mut c = PhaseConfig::preset(Phase::OneStep);
        c.target_feature = FeatureKind::S3r;
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_two_without_stage_one() {
        let p = pairs(FeatureKind::S3r, 2);
        for phase in [Phase::DecFtStage2, Phase::EncFtStage2] {
            let err = run_phase(&PhaseConfig::preset(phase), &tiny(), &quick(), &p, None).unwrap_err();
            assert!(matches!(err, S2sError::MissingPrerequisite { .. }));
        }
        let one = run_phase(&PhaseConfig::preset(Phase::OneStep), &tiny(), &quick(), &p, None).unwrap();
        let err = run_phase(
            &PhaseConfig::preset(Phase::DecFtStage2),
            &tiny(),
            &quick(),
            &p,
            Some(&one.checkpoint),
        )
        .unwrap_err();
        assert!(matches!(err, S2sError::MissingPrerequisite { needs: Phase::DecFtStage1, .. }));
    }

    #[test]
    fn decoder_fine_tuning_keeps_encoder() {
        let p = pairs(FeatureKind::S3r, 3);
        let s1 = run_phase(&PhaseConfig::preset(Phase::DecFtStage1), &tiny(), &quick(), &p, None).unwrap();
        let s2 = run_phase(
            &PhaseConfig::preset(Phase::DecFtStage2),
            &tiny(),
            &quick(),
            &p,
            Some(&s1.checkpoint),
        )
        .unwrap();
        for g in [ParamGroup::Encoder, ParamGroup::DurationPredictor] {
            assert_eq!(s1.checkpoint.fingerprint(g), s2.checkpoint.fingerprint(g));
            assert_eq!(s1.checkpoint.groups[&g].version, s2.checkpoint.groups[&g].version);
        }
        assert_ne!(
            s1.checkpoint.fingerprint(ParamGroup::Decoder),
            s2.checkpoint.fingerprint(ParamGroup::Decoder)
        );
        assert_eq!(s2.changed_groups, vec![ParamGroup::Decoder, ParamGroup::Alignment]);
        assert_eq!(s2.checkpoint.phases.len(), 2);
    }

    #[test]
    fn encoder_fine_tuning_rebuilds_encoder_and_keeps_decoder() {
        let stage1 = pairs(FeatureKind::PpgBnf, 3);
        let s1 = run_phase(&PhaseConfig::preset(Phase::EncFtStage1), &tiny(), &quick(), &stage1, None)
            .unwrap();
        assert_eq!(s1.checkpoint.config.source_dim, 144);
        let stage2 = pairs(FeatureKind::S3r, 3);
        let s2 = run_phase(
            &PhaseConfig::preset(Phase::EncFtStage2),
            &tiny(),
            &quick(),
            &stage2,
            Some(&s1.checkpoint),
        )
        .unwrap();
        assert_eq!(s2.checkpoint.config.source_dim, 768);
        assert_eq!(
            s1.checkpoint.fingerprint(ParamGroup::Decoder),
            s2.checkpoint.fingerprint(ParamGroup::Decoder)
        );
        assert!(s2.changed_groups.contains(&ParamGroup::Encoder));
        assert!(!s2.changed_groups.contains(&ParamGroup::Decoder));
    }

    #[test]
    fn phase_rejects_wrong_feature_kind() {
        let p = pairs(FeatureKind::PpgBnf, 2);
        let err = run_phase(&PhaseConfig::preset(Phase::OneStep), &tiny(), &quick(), &p, None).unwrap_err();
        assert!(matches!(err, S2sError::PhaseInvariant { .. }));
    }

    #[test]
    fn phase_config_from_toml() {
        let c: PhaseConfig = toml::from_str(
            r#"
            phase = "dec_ft_stage2"
            source_role = "L2_R"
            source_feature = "s3r"
            target_role = "L1_S1"
            target_feature = "mel"
            frozen_groups = ["encoder"]
            "#,
        )
        .unwrap();
        c.validate().unwrap();
        assert!(!c.frozen_groups.contains(&ParamGroup::DurationPredictor));
    }
}
