use std::collections::BTreeSet;

use candle_core::{Device, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fsum::forward_sum_loss;
use super::nn::{
    block, conv3, denormalize, layer_norm, linear, normalize, positional_encoding, to_array,
    to_tensor, Dropout, Init, ParamStore, Weights,
};
use super::{ModelConfig, ParamGroup, S2sError};
use crate::alignkit::{durations_from_path, log_softmax_columns, mas, ScoreMatrix};
use crate::data::{FeatureKind, FeatureSequence};

/// Scale applied to squared projection distances in the aligner.
const ALIGN_TEMPERATURE: f64 = 0.05;

fn group_seed(seed: u64, group: ParamGroup) -> u64 {
    let salt = match group {
        ParamGroup::Encoder => 0x11,
        ParamGroup::Decoder => 0x22,
        ParamGroup::DurationPredictor => 0x33,
        ParamGroup::Alignment => 0x44,
    };
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt
}

/// `round_half_up(max(d, 1))` for every duration.
pub fn round_durations(durations: &[f64]) -> Vec<usize> {
    durations
        .iter()
        .map(|d| (d.max(1.0) + 0.5).floor() as usize)
        .collect()
}

fn kind_for_dim(dim: usize) -> FeatureKind {
    [FeatureKind::Mel, FeatureKind::PpgBnf, FeatureKind::S3r]
        .into_iter()
        .find(|k| k.default_dim() == Some(dim))
        .unwrap_or(FeatureKind::Other)
}

pub(crate) struct PairForward {
    pub recon: Tensor,
    pub forward_sum: Tensor,
    pub duration: Tensor,
}

#[derive(Debug, Clone)]
pub struct S2sModel {
    config: ModelConfig,
    params: ParamStore,
}

impl S2sModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, S2sError> {
        config.validate()?;
        let mut model = Self {
            config,
            params: ParamStore::new(),
        };
        for group in ParamGroup::ALL {
            model.init_group(group, seed)?;
        }
        Ok(model)
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self, S2sError> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        let expected: Vec<(&str, Vec<usize>)> = reference
            .params
            .iter()
            .map(|(n, v)| (n, v.as_tensor().dims().to_vec()))
            .collect();
        let actual: Vec<(&str, Vec<usize>)> = params
            .iter()
            .map(|(n, v)| (n, v.as_tensor().dims().to_vec()))
            .collect();
        if expected != actual {
            let diff = expected
                .iter()
                .zip(actual.iter())
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| {
                    format!("expected {} tensors, found {}", expected.len(), actual.len())
                });
            return Err(S2sError::Checkpoint(format!(
                "parameters do not fit the configured dims: {diff}"
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn target_kind(&self) -> FeatureKind {
        kind_for_dim(self.config.target_dim)
    }

    /// Fresh seeded weights for one group; feature statistics reset to the
    /// identity transform.
    pub fn init_group(&mut self, group: ParamGroup, seed: u64) -> Result<(), S2sError> {
        self.params.remove_group(group);
        let mut rng = ChaCha8Rng::seed_from_u64(group_seed(seed, group));
        let c = &self.config;
        let h = c.hidden_dim;
        let mut init = Init {
            store: &mut self.params,
            rng: &mut rng,
        };
        match group {
            ParamGroup::Encoder => {
                init.stats("encoder", vec![0.0; c.source_dim], vec![1.0; c.source_dim])?;
                init.linear("encoder.in_proj", c.source_dim, h)?;
                for b in 0..c.num_encoder_blocks {
                    init.block(&format!("encoder.block{b}"), h)?;
                }
                init.layer_norm("encoder.ln_out", h)?;
            }
            ParamGroup::Alignment => {
                init.conv3("alignment.key1", h, h)?;
                init.linear("alignment.key2", h, h)?;
                init.conv3("alignment.query1", c.target_dim, h)?;
                init.linear("alignment.query2", h, h)?;
            }
            ParamGroup::DurationPredictor => {
                init.conv3("duration_predictor.conv1", h, h)?;
                init.layer_norm("duration_predictor.ln1", h)?;
                init.conv3("duration_predictor.conv2", h, h)?;
                init.layer_norm("duration_predictor.ln2", h)?;
                init.linear("duration_predictor.out", h, 1)?;
            }
            ParamGroup::Decoder => {
                init.stats("decoder", vec![0.0; c.target_dim], vec![1.0; c.target_dim])?;
                for b in 0..c.num_decoder_blocks {
                    init.block(&format!("decoder.block{b}"), h)?;
                }
                init.layer_norm("decoder.ln_out", h)?;
                init.linear("decoder.out_proj", h, c.target_dim)?;
            }
        }
        Ok(())
    }

    /// Replaces the encoder with a fresh one reading `source_dim` inputs.
    pub fn rebuild_encoder(&mut self, source_dim: usize, seed: u64) -> Result<(), S2sError> {
        self.config.source_dim = source_dim;
        self.config.validate()?;
        self.init_group(ParamGroup::Encoder, seed)
    }

    /// Sets every weight of `group` to zero.
    pub fn zero_group(&mut self, group: ParamGroup) -> Result<(), S2sError> {
        for (_, var) in self.params.in_group(group) {
            var.set(&var.as_tensor().zeros_like()?)?;
        }
        Ok(())
    }

    pub(crate) fn set_stats(
        &mut self,
        group: ParamGroup,
        mean: Vec<f32>,
        std: Vec<f32>,
    ) -> Result<(), S2sError> {
        let prefix = group.as_str();
        let dim = mean.len();
        for (name, data) in [("mean", mean), ("std", std)] {
            let var = self.params.var(&format!("{prefix}.norm_stats.{name}"))?;
            var.set(&Tensor::from_vec(data, dim, &Device::Cpu)?)?;
        }
        Ok(())
    }

    fn check_source(&self, src: &FeatureSequence) -> Result<(), S2sError> {
        if src.dim() != self.config.source_dim {
            return Err(S2sError::DimMismatch {
                expected: self.config.source_dim,
                actual: src.dim(),
            });
        }
        Ok(())
    }

    fn check_target(&self, tgt: &FeatureSequence) -> Result<(), S2sError> {
        if tgt.dim() != self.config.target_dim {
            return Err(S2sError::DimMismatch {
                expected: self.config.target_dim,
                actual: tgt.dim(),
            });
        }
        Ok(())
    }

    pub(crate) fn encode_t(
        &self,
        w: &Weights,
        src: &Tensor,
        dropout: &mut Dropout,
    ) -> Result<Tensor, S2sError> {
        let (t, _) = src.dims2()?;
        let x = normalize(w, "encoder", src)?;
        let x = linear(w, "encoder.in_proj", &x)?;
        let mut x = (x + positional_encoding(t, self.config.hidden_dim)?)?;
        x = dropout.apply(&x)?;
        for b in 0..self.config.num_encoder_blocks {
            x = block(w, &format!("encoder.block{b}"), &x, self.config.attention_heads, dropout)?;
        }
        layer_norm(w, "encoder.ln_out", &x)
    }

    /// Raw aligner scores `-temperature * ||key_i - query_j||^2`.
    pub(crate) fn align_scores_t(
        &self,
        w: &Weights,
        enc: &Tensor,
        tgt: &Tensor,
    ) -> Result<Tensor, S2sError> {
        let k = conv3(w, "alignment.key1", enc)?.relu()?;
        let k = linear(w, "alignment.key2", &k)?;
        let q = normalize(w, "decoder", tgt)?;
        let q = conv3(w, "alignment.query1", &q)?.relu()?;
        let q = linear(w, "alignment.query2", &q)?;
        let kk = k.sqr()?.sum_keepdim(1)?;
        let qq = q.sqr()?.sum_keepdim(1)?.t()?;
        let kq = k.matmul(&q.t()?)?;
        let dist = (kk.broadcast_add(&qq)? - (kq * 2.0)?)?;
        Ok((dist * (-ALIGN_TEMPERATURE))?)
    }

    pub(crate) fn log_durations_t(
        &self,
        w: &Weights,
        enc: &Tensor,
        dropout: &mut Dropout,
    ) -> Result<Tensor, S2sError> {
        let mut x = enc.detach();
        for (conv, ln) in [("conv1", "ln1"), ("conv2", "ln2")] {
            x = conv3(w, &format!("duration_predictor.{conv}"), &x)?.relu()?;
            x = layer_norm(w, &format!("duration_predictor.{ln}"), &x)?;
            x = dropout.apply(&x)?;
        }
        Ok(linear(w, "duration_predictor.out", &x)?.squeeze(1)?)
    }

    pub(crate) fn decode_t(
        &self,
        w: &Weights,
        regulated: &Tensor,
        dropout: &mut Dropout,
    ) -> Result<Tensor, S2sError> {
        let (t, _) = regulated.dims2()?;
        let mut x = (regulated + positional_encoding(t, self.config.hidden_dim)?)?;
        for b in 0..self.config.num_decoder_blocks {
            x = block(w, &format!("decoder.block{b}"), &x, self.config.attention_heads, dropout)?;
        }
        let x = layer_norm(w, "decoder.ln_out", &x)?;
        let x = linear(w, "decoder.out_proj", &x)?;
        denormalize(w, "decoder", &x)
    }

    pub(crate) fn forward_pair(
        &self,
        w: &Weights,
        src: &FeatureSequence,
        tgt: &FeatureSequence,
        dropout: &mut Dropout,
    ) -> Result<PairForward, S2sError> {
        self.check_source(src)?;
        self.check_target(tgt)?;
        let src_t = to_tensor(src.data())?;
        let tgt_t = to_tensor(tgt.data())?;
        let enc = self.encode_t(w, &src_t, dropout)?;
        let scores = self.align_scores_t(w, &enc, &tgt_t)?;
        let forward_sum = forward_sum_loss(&scores)?;

        let raw = to_array(&scores)?.mapv(|v| v as f64);
        let path = mas(&ScoreMatrix::log_likelihood(log_softmax_columns(&raw))?)?;
        let durations = durations_from_path(&path, src.num_frames());
        let index: Vec<u32> = path.steps.iter().map(|&(i, _)| i as u32).collect();
        let index = Tensor::from_vec(index, tgt.num_frames(), &Device::Cpu)?;

        let regulated = enc.index_select(&index, 0)?;
        let out = self.decode_t(w, &regulated, dropout)?;
        let recon = (out - &tgt_t)?.abs()?.mean_all()?;

        let log_d = self.log_durations_t(w, &enc, dropout)?;
        let target: Vec<f32> = durations.iter().map(|d| (*d as f32).ln()).collect();
        let target = Tensor::from_vec(target, durations.len(), &Device::Cpu)?;
        let duration = (log_d - target)?.sqr()?.mean_all()?;
        Ok(PairForward {
            recon,
            forward_sum,
            duration,
        })
    }

    fn inference_weights<'a>(&'a self, none: &'a BTreeSet<ParamGroup>) -> Weights<'a> {
        Weights::new(&self.params, none)
    }

    /// Encoder hidden states, `(T_src, hidden_dim)`.
    pub fn encode(&self, src: &FeatureSequence) -> Result<Array2<f32>, S2sError> {
        self.check_source(src)?;
        let none = BTreeSet::new();
        let w = self.inference_weights(&none);
        to_array(&self.encode_t(&w, &to_tensor(src.data())?, &mut Dropout::off())?)
    }

    /// Aligner log-likelihoods, log-softmax normalized over the source axis.
    pub fn soft_alignment(
        &self,
        enc: &Array2<f32>,
        tgt: &FeatureSequence,
    ) -> Result<ScoreMatrix, S2sError> {
        self.check_target(tgt)?;
        if enc.ncols() != self.config.hidden_dim {
            return Err(S2sError::DimMismatch {
                expected: self.config.hidden_dim,
                actual: enc.ncols(),
            });
        }
        if enc.nrows() == 0 {
            return Err(S2sError::EmptyInput);
        }
        let none = BTreeSet::new();
        let w = self.inference_weights(&none);
        let scores = self.align_scores_t(&w, &to_tensor(enc)?, &to_tensor(tgt.data())?)?;
        let raw = to_array(&scores)?.mapv(|v| v as f64);
        Ok(ScoreMatrix::log_likelihood(log_softmax_columns(&raw))?)
    }

    /// Predicted per-source-frame durations, `exp` of the predicted
    /// log-durations.
    pub fn predict_durations(&self, enc: &Array2<f32>) -> Result<Vec<f64>, S2sError> {
        if enc.ncols() != self.config.hidden_dim {
            return Err(S2sError::DimMismatch {
                expected: self.config.hidden_dim,
                actual: enc.ncols(),
            });
        }
        if enc.nrows() == 0 {
            return Err(S2sError::EmptyInput);
        }
        let none = BTreeSet::new();
        let w = self.inference_weights(&none);
        let log_d = self.log_durations_t(&w, &to_tensor(enc)?, &mut Dropout::off())?;
        Ok(log_d
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| (v as f64).exp())
            .collect())
    }

    /// Inference-mode conversion with predicted durations.
    pub fn convert(&self, src: &FeatureSequence) -> Result<FeatureSequence, S2sError> {
        self.check_source(src)?;
        let none = BTreeSet::new();
        let w = self.inference_weights(&none);
        let mut off = Dropout::off();
        let enc = self.encode_t(&w, &to_tensor(src.data())?, &mut off)?;
        let log_d = self.log_durations_t(&w, &enc, &mut off)?;
        let durations: Vec<f64> = log_d
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| (v as f64).exp())
            .collect();
        let counts = round_durations(&durations);
        let index: Vec<u32> = counts
            .iter()
            .enumerate()
            .flat_map(|(i, &n)| std::iter::repeat(i as u32).take(n))
            .collect();
        let n = index.len();
        let index = Tensor::from_vec(index, n, &Device::Cpu)?;
        let out = self.decode_t(&w, &enc.index_select(&index, 0)?, &mut off)?;
        let out = to_array(&out)?;
        Ok(FeatureSequence::new(out, src.stride_ms(), self.target_kind())?)
    }

    /// Aligner log-likelihoods between a source and a target sequence.
    pub fn align(
        &self,
        src: &FeatureSequence,
        tgt: &FeatureSequence,
    ) -> Result<ScoreMatrix, S2sError> {
        let enc = self.encode(src)?;
        self.soft_alignment(&enc, tgt)
    }
}
