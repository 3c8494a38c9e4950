use std::collections::{BTreeMap, BTreeSet};

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{Dropout, ParamStore, Weights};
use super::{LossWeights, ParamGroup, S2sError, S2sModel};
use crate::data::FeatureSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 4,
            learning_rate: 2e-3,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), S2sError> {
        if self.batch_size == 0 {
            return Err(S2sError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(S2sError::Config("learning_rate must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(S2sError::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub id: String,
    pub src: FeatureSequence,
    pub tgt: FeatureSequence,
}

impl TrainingPair {
    /// Builds a pair, right-padding a target shorter than its source with
    /// the target's last frame.
    pub fn new(id: impl Into<String>, src: FeatureSequence, tgt: FeatureSequence) -> Result<Self, S2sError> {
        let tgt = pad_target(&tgt, src.num_frames())?;
        Ok(Self {
            id: id.into(),
            src,
            tgt,
        })
    }
}

/// Repeats the final frame until the sequence has at least `min_frames`.
pub fn pad_target(tgt: &FeatureSequence, min_frames: usize) -> Result<FeatureSequence, S2sError> {
    let t = tgt.num_frames();
    if t >= min_frames {
        return Ok(tgt.clone());
    }
    let last = tgt.data().row(t - 1).insert_axis(Axis(0)).to_owned();
    let pad = last
        .broadcast((min_frames - t, tgt.dim()))
        .expect("row broadcasts")
        .to_owned();
    let data: Array2<f32> = concatenate(Axis(0), &[tgt.data().view(), pad.view()]).expect("same dim");
    Ok(FeatureSequence::new(data, tgt.stride_ms(), tgt.kind())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub recon: f64,
    pub forward_sum: f64,
    pub duration: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(step: usize, recon: f64, forward_sum: f64, duration: f64, w: &LossWeights) -> Self {
        Self {
            step,
            recon,
            forward_sum,
            duration,
            total: w.recon * recon + w.forward_sum * forward_sum + w.duration * duration,
        }
    }

    fn is_finite(&self) -> bool {
        self.recon.is_finite() && self.forward_sum.is_finite() && self.duration.is_finite()
    }
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

struct BatchLoss {
    total: Tensor,
    recon: Tensor,
    breakdown: LossBreakdown,
}

fn batch_loss(
    model: &S2sModel,
    frozen: &BTreeSet<ParamGroup>,
    batch: &[&TrainingPair],
    dropout: &mut Dropout,
    step: usize,
) -> Result<BatchLoss, S2sError> {
    if batch.is_empty() {
        return Err(S2sError::NoData);
    }
    let w = Weights::new(model.params(), frozen);
    let weights = model.config().loss_weights;
    let scale = 1.0 / batch.len() as f64;
    let mut recon = Vec::with_capacity(batch.len());
    let mut fsum = Vec::with_capacity(batch.len());
    let mut dur = Vec::with_capacity(batch.len());
    for pair in batch {
        let f = model.forward_pair(&w, &pair.src, &pair.tgt, dropout)?;
        recon.push(f.recon);
        fsum.push(f.forward_sum);
        dur.push(f.duration);
    }
    let mean = |xs: Vec<Tensor>| -> Result<Tensor, S2sError> {
        Ok((Tensor::stack(&xs, 0)?.sum_all()? * scale)?)
    };
    let (recon, fsum, dur) = (mean(recon)?, mean(fsum)?, mean(dur)?);
    let total = ((&recon * weights.recon)? + (&fsum * weights.forward_sum)?)?;
    let total = (total + (&dur * weights.duration)?)?;
    let breakdown = LossBreakdown::new(
        step,
        recon.to_scalar::<f32>()? as f64,
        fsum.to_scalar::<f32>()? as f64,
        dur.to_scalar::<f32>()? as f64,
        &weights,
    );
    Ok(BatchLoss {
        total,
        recon,
        breakdown,
    })
}

/// Optimizer state and seeded sampling for one training run. Frozen groups
/// are kept out of the optimizer and enter the graph detached.
pub struct Trainer {
    model: S2sModel,
    frozen: BTreeSet<ParamGroup>,
    trainable: Vec<candle_core::Var>,
    optimizer: AdamW,
    config: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: S2sModel, frozen: BTreeSet<ParamGroup>, config: TrainConfig) -> Result<Self, S2sError> {
        config.validate()?;
        let trainable = model.params().trainable(&frozen);
        let optimizer = AdamW::new(
            trainable.clone(),
            ParamsAdamW {
                lr: config.learning_rate,
                weight_decay: 0.0,
                ..ParamsAdamW::default()
            },
        )?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);
        Ok(Self {
            model,
            frozen,
            trainable,
            optimizer,
            config,
            rng,
            step: 0,
        })
    }

    pub fn model(&self) -> &S2sModel {
        &self.model
    }

    pub fn into_model(self) -> S2sModel {
        self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[&TrainingPair]) -> Result<LossBreakdown, S2sError> {
        let mut dropout = Dropout {
            p: self.model.config().dropout,
            rng: Some(&mut self.rng),
        };
        let loss = batch_loss(&self.model, &self.frozen, batch, &mut dropout, self.step)?;
        if !loss.breakdown.is_finite() {
            let b = loss.breakdown;
            return Err(S2sError::NonFiniteLoss {
                step: self.step,
                recon: b.recon,
                forward_sum: b.forward_sum,
                duration: b.duration,
            });
        }
        let mut grads = loss.total.backward()?;
        if self.config.grad_clip > 0.0 {
            let mut sq = 0f64;
            for var in &self.trainable {
                if let Some(g) = grads.get(var.as_tensor()) {
                    sq += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
                }
            }
            let norm = sq.sqrt();
            if norm > self.config.grad_clip {
                let factor = self.config.grad_clip / norm;
                for var in &self.trainable {
                    if let Some(g) = grads.remove(var.as_tensor()) {
                        grads.insert(var.as_tensor(), (g * factor)?);
                    }
                }
            }
        }
        self.optimizer.step(&grads)?;
        self.step += 1;
        Ok(loss.breakdown)
    }

    /// Runs `config.steps` updates over seeded shuffles of `pairs`.
    pub fn fit(&mut self, pairs: &[TrainingPair]) -> Result<Vec<LossBreakdown>, S2sError> {
        if pairs.is_empty() {
            return Err(S2sError::NoData);
        }
        let mut order: Vec<usize> = Vec::new();
        let mut history = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            if order.len() < self.config.batch_size.min(pairs.len()) {
                let mut epoch: Vec<usize> = (0..pairs.len()).collect();
                epoch.shuffle(&mut self.rng);
                order.extend(epoch);
            }
            let take = self.config.batch_size.min(pairs.len());
            let batch: Vec<&TrainingPair> = order.drain(..take).map(|i| &pairs[i]).collect();
            let b = self.train_step(&batch)?;
            log::debug!(
                "step {} total {:.4} recon {:.4} fsum {:.4} dur {:.4}",
                b.step, b.total, b.recon, b.forward_sum, b.duration
            );
            history.push(b);
        }
        Ok(history)
    }
}

/// L2 norm of the gradient of one loss (reconstruction alone if
/// `recon_only`) per parameter group, dropout off.
pub fn gradient_norms(
    model: &S2sModel,
    frozen: &BTreeSet<ParamGroup>,
    batch: &[&TrainingPair],
    recon_only: bool,
) -> Result<BTreeMap<ParamGroup, f64>, S2sError> {
    let loss = batch_loss(model, frozen, batch, &mut Dropout::off(), 0)?;
    let target = if recon_only { &loss.recon } else { &loss.total };
    let grads = target.backward()?;
    let mut out: BTreeMap<ParamGroup, f64> = ParamGroup::ALL.iter().map(|g| (*g, 0.0)).collect();
    for (name, var) in model.params().iter() {
        let Some(group) = ParamStore::group_of(name) else { continue };
        if let Some(g) = grads.get(var.as_tensor()) {
            *out.get_mut(&group).expect("all groups present") +=
                g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        }
    }
    out.values_mut().for_each(|v| *v = v.sqrt());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureKind;
    use crate::s2s::ModelConfig;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            source_dim: 4,
            target_dim: 4,
            hidden_dim: 16,
            num_encoder_blocks: 1,
            num_decoder_blocks: 1,
            attention_heads: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn pair(t_src: usize, t_tgt: usize, salt: f32) -> TrainingPair {
        let f = |t: usize| {
            FeatureSequence::new(
                Array2::from_shape_fn((t, 4), |(i, j)| ((i + j) as f32 * 0.4 + salt).cos()),
                20.0,
                FeatureKind::Other,
            )
            .unwrap()
        };
        TrainingPair::new("p", f(t_src), f(t_tgt)).unwrap()
    }

    #[test]
    fn short_targets_are_padded_with_last_frame() {
        let p = pair(6, 4, 0.0);
        assert_eq!(p.tgt.num_frames(), 6);
        assert_eq!(p.tgt.row(5), p.tgt.row(3));
        assert_eq!(p.tgt.row(4), p.tgt.row(3));
    }

    #[test]
    fn recon_only_weights_make_total_equal_recon() {
        let mut config = toy_config();
        config.loss_weights = LossWeights {
            recon: 1.0,
            forward_sum: 0.0,
            duration: 0.0,
        };
        let model = S2sModel::new(config, 1).unwrap();
        let mut trainer = Trainer::new(model, BTreeSet::new(), TrainConfig::default()).unwrap();
        let p = pair(5, 8, 0.1);
        let b = trainer.train_step(&[&p]).unwrap();
        assert_eq!(b.total, b.recon);
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let mut config = toy_config();
        config.loss_weights = LossWeights {
            recon: 0.7,
            forward_sum: 1.3,
            duration: 0.25,
        };
        let model = S2sModel::new(config, 2).unwrap();
        let mut trainer = Trainer::new(model, BTreeSet::new(), TrainConfig::default()).unwrap();
        let (a, b) = (pair(5, 8, 0.1), pair(3, 9, 0.7));
        let l = trainer.train_step(&[&a, &b]).unwrap();
        assert_eq!(l.total, 0.7 * l.recon + 1.3 * l.forward_sum + 0.25 * l.duration);
    }

    #[test]
    fn frozen_decoder_is_untouched_and_gets_no_gradient() {
        let model = S2sModel::new(toy_config(), 3).unwrap();
        let frozen: BTreeSet<_> = [ParamGroup::Decoder].into_iter().collect();
        let p = pair(5, 7, 0.2);
        let norms = gradient_norms(&model, &frozen, &[&p], true).unwrap();
        assert!(norms[&ParamGroup::Encoder] > 0.0);
        assert_eq!(norms[&ParamGroup::Decoder], 0.0);

        let before: Vec<Vec<f32>> = model
            .params()
            .in_group(ParamGroup::Decoder)
            .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1().unwrap())
            .collect();
        let mut trainer = Trainer::new(model, frozen, TrainConfig::default()).unwrap();
        for _ in 0..3 {
            trainer.train_step(&[&p]).unwrap();
        }
        let after: Vec<Vec<f32>> = trainer
            .model()
            .params()
            .in_group(ParamGroup::Decoder)
            .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1().unwrap())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[4.0, 2.0, 0.0, 2.0], 2), vec![4.0, 3.0, 1.0, 1.0]);
    }
}
