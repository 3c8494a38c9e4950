//! Single-speaker PPG-to-spectrogram decoder: a framewise sequence model
//! built from the conversion model's blocks.

use std::collections::BTreeSet;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SynthError;
use crate::data::{FeatureKind, FeatureSequence};
use crate::s2s::nn::{
    block, denormalize, feature_stats, layer_norm, linear, normalize, positional_encoding,
    to_array, to_tensor, Dropout, Init, ParamStore, Weights,
};
use crate::s2s::{Architecture, Checkpoint, ModelConfig, S2sError, TrainConfig};

pub const PPG_DIM: usize = 144;
pub const MEL_DIM: usize = 80;

/// A (PPG, mel) pair of one utterance; both share the frame grid.
#[derive(Debug, Clone)]
pub struct SpecPair {
    pub ppg: FeatureSequence,
    pub mel: FeatureSequence,
}

#[derive(Debug, Clone)]
pub struct PpgToSpec {
    config: ModelConfig,
    params: ParamStore,
}

impl PpgToSpec {
    pub fn default_config() -> ModelConfig {
        ModelConfig {
            source_dim: PPG_DIM,
            target_dim: MEL_DIM,
            num_encoder_blocks: 0,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, SynthError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let h = config.hidden_dim;
        init.stats("encoder", vec![0.0; config.source_dim], vec![1.0; config.source_dim])?;
        init.linear("encoder.in_proj", config.source_dim, h)?;
        for b in 0..config.num_decoder_blocks {
            init.block(&format!("decoder.block{b}"), h)?;
        }
        init.layer_norm("decoder.ln_out", h)?;
        init.linear("decoder.out_proj", h, config.target_dim)?;
        init.stats("decoder", vec![0.0; config.target_dim], vec![1.0; config.target_dim])?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(&self, w: &Weights, ppg: &Tensor, dropout: &mut Dropout) -> Result<Tensor, S2sError> {
        let (t, _) = ppg.dims2()?;
        let x = linear(w, "encoder.in_proj", &normalize(w, "encoder", ppg)?)?;
        let mut x = (x + positional_encoding(t, self.config.hidden_dim)?)?;
        for b in 0..self.config.num_decoder_blocks {
            x = block(w, &format!("decoder.block{b}"), &x, self.config.attention_heads, dropout)?;
        }
        let x = linear(w, "decoder.out_proj", &layer_norm(w, "decoder.ln_out", &x)?)?;
        denormalize(w, "decoder", &x)
    }

    fn check(&self, ppg: &FeatureSequence) -> Result<(), SynthError> {
        if ppg.dim() != self.config.source_dim {
            return Err(SynthError::DimMismatch {
                expected: self.config.source_dim,
                actual: ppg.dim(),
            });
        }
        Ok(())
    }

    /// Mel frames for every PPG frame.
    pub fn infer(&self, ppg: &FeatureSequence) -> Result<FeatureSequence, SynthError> {
        self.check(ppg)?;
        let none = BTreeSet::new();
        let w = Weights::new(&self.params, &none);
        let out = self.forward(&w, &to_tensor(ppg.data())?, &mut Dropout::off())?;
        let kind = if self.config.target_dim == MEL_DIM {
            FeatureKind::Mel
        } else {
            FeatureKind::Other
        };
        Ok(FeatureSequence::new(to_array(&out)?, ppg.stride_ms(), kind)?)
    }

    /// Mean absolute error over all frames of all pairs.
    pub fn mae(&self, pairs: &[SpecPair]) -> Result<f64, SynthError> {
        let mut total = 0f64;
        let mut count = 0usize;
        for p in pairs {
            let y = self.infer(&p.ppg)?;
            total += y
                .data()
                .iter()
                .zip(p.mel.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>();
            count += p.mel.data().len();
        }
        Ok(total / count.max(1) as f64)
    }

    /// Trains with mean absolute error and returns the per-step losses.
    pub fn train(&mut self, pairs: &[SpecPair], config: &TrainConfig) -> Result<Vec<f64>, SynthError> {
        config.validate()?;
        if pairs.is_empty() {
            return Err(SynthError::NoData);
        }
        for p in pairs {
            self.check(&p.ppg)?;
            if p.mel.num_frames() != p.ppg.num_frames() || p.mel.dim() != self.config.target_dim {
                return Err(SynthError::Config(format!(
                    "pair shapes ({}, {}) and ({}, {}) do not line up",
                    p.ppg.num_frames(),
                    p.ppg.dim(),
                    p.mel.num_frames(),
                    p.mel.dim()
                )));
            }
        }
        let (m, s) = feature_stats(pairs.iter().map(|p| p.ppg.data()), self.config.source_dim);
        self.set_stats("encoder", m, s)?;
        let (m, s) = feature_stats(pairs.iter().map(|p| p.mel.data()), self.config.target_dim);
        self.set_stats("decoder", m, s)?;

        let none = BTreeSet::new();
        let mut opt = AdamW::new(
            self.params.trainable(&none),
            ParamsAdamW {
                lr: config.learning_rate,
                weight_decay: 0.0,
                ..ParamsAdamW::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9905);
        let mut order: Vec<usize> = Vec::new();
        let take = config.batch_size.min(pairs.len());
        let mut history = Vec::with_capacity(config.steps);
        for _ in 0..config.steps {
            if order.len() < take {
                let mut epoch: Vec<usize> = (0..pairs.len()).collect();
                epoch.shuffle(&mut rng);
                order.extend(epoch);
            }
            let w = Weights::new(&self.params, &none);
            let mut dropout = Dropout {
                p: self.config.dropout,
                rng: Some(&mut rng),
            };
            let mut losses = Vec::with_capacity(take);
            for i in order.drain(..take).collect::<Vec<_>>() {
                let p = &pairs[i];
                let y = self.forward(&w, &to_tensor(p.ppg.data())?, &mut dropout)?;
                losses.push((y - to_tensor(p.mel.data())?)?.abs()?.mean_all()?);
            }
            let loss = Tensor::stack(&losses, 0)?.mean_all()?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(SynthError::Config(format!("non-finite loss at step {}", history.len())));
            }
            opt.backward_step(&loss)?;
            history.push(value);
        }
        Ok(history)
    }

    fn set_stats(&mut self, prefix: &str, mean: Vec<f32>, std: Vec<f32>) -> Result<(), SynthError> {
        let dim = mean.len();
        for (name, data) in [("mean", mean), ("std", std)] {
            let var = self.params.var(&format!("{prefix}.norm_stats.{name}"))?;
            var.set(&Tensor::from_vec(data, dim, &candle_core::Device::Cpu)?)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, SynthError> {
        Ok(Checkpoint::from_params(
            Architecture::PpgToSpec,
            &self.config,
            &self.params,
            0,
            vec![],
            None,
        )?)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, SynthError> {
        if ckpt.architecture != Architecture::PpgToSpec {
            return Err(SynthError::Config(format!(
                "checkpoint holds a {:?} model, not a PPG-to-Spec decoder",
                ckpt.architecture
            )));
        }
        let reference = Self::new(ckpt.config.clone(), 0)?;
        let params = ckpt.to_params()?;
        let shapes = |p: &ParamStore| -> Vec<(String, Vec<usize>)> {
            p.iter()
                .map(|(n, v)| (n.to_string(), v.as_tensor().dims().to_vec()))
                .collect()
        };
        if shapes(&reference.params) != shapes(&params) {
            return Err(SynthError::Config(
                "decoder parameters do not fit the configured dims".into(),
            ));
        }
        Ok(Self {
            config: ckpt.config.clone(),
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_triplets, SyntheticConfig};
    use crate::features::project_mel;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden_dim: 32,
            num_decoder_blocks: 1,
            ..PpgToSpec::default_config()
        }
    }

    fn pairs(n: usize, seed: u64) -> Vec<SpecPair> {
        let corpus = generate_synthetic_triplets(&SyntheticConfig {
            n,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        corpus
            .triplets
            .iter()
            .map(|t| SpecPair {
                ppg: project_mel(&t.ss, PPG_DIM, 144, FeatureKind::PpgBnf).unwrap(),
                mel: t.ss.clone(),
            })
            .collect()
    }

    #[test]
    fn frame_count_is_preserved() {
        let m = PpgToSpec::new(small(), 0).unwrap();
        let p = &pairs(1, 3)[0];
        let y = m.infer(&p.ppg).unwrap();
        assert_eq!(y.num_frames(), p.ppg.num_frames());
        assert_eq!(y.dim(), 80);
        assert_eq!(y.kind(), FeatureKind::Mel);
    }

    #[test]
    fn wrong_input_dim() {
        let m = PpgToSpec::new(small(), 0).unwrap();
        let p = &pairs(1, 3)[0];
        assert!(matches!(
            m.infer(&p.mel),
            Err(SynthError::DimMismatch { expected: 144, actual: 80 })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = PpgToSpec::new(small(), 4).unwrap();
        let ckpt = Checkpoint::decode(&m.to_checkpoint().unwrap().encode()).unwrap();
        let back = PpgToSpec::from_checkpoint(&ckpt).unwrap();
        let p = &pairs(1, 3)[0];
        assert_eq!(m.infer(&p.ppg).unwrap(), back.infer(&p.ppg).unwrap());
    }

    #[test]
    fn toy_training_halves_held_out_error() {
        let train = pairs(12, 21);
        let held_out = pairs(4, 22);
        let mut m = PpgToSpec::new(small(), 1).unwrap();
        let untrained = m.mae(&held_out).unwrap();
        m.train(
            &train,
            &TrainConfig {
                steps: 120,
                batch_size: 4,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let trained = m.mae(&held_out).unwrap();
        assert!(trained < 0.5 * untrained, "trained {trained} untrained {untrained}");
    }
}
