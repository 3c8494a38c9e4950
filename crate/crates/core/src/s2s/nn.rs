//! Named parameters and the layer functions built on them.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ParamGroup, S2sError};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Name-keyed parameter store. The group of a parameter is the prefix before
/// the first dot.
#[derive(Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

/// Cloning copies storage; clones never alias each other's weights.
impl Clone for ParamStore {
    fn clone(&self) -> Self {
        let vars = self
            .vars
            .iter()
            .map(|(name, var)| {
                let copy = var.as_tensor().copy().expect("cpu copy");
                (name.clone(), Var::from_tensor(&copy).expect("cpu var"))
            })
            .collect();
        Self { vars }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, data: Vec<f32>, shape: &[usize]) -> Result<(), S2sError> {
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        self.vars.insert(name, Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn var(&self, name: &str) -> Result<&Var, S2sError> {
        self.vars
            .get(name)
            .ok_or_else(|| S2sError::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn group_of(name: &str) -> Option<ParamGroup> {
        name.split('.').next().and_then(|g| g.parse().ok())
    }

    /// Fixed statistics (feature normalization) live next to the weights but
    /// never receive updates.
    pub fn is_statistic(name: &str) -> bool {
        name.contains(".norm_stats.")
    }

    pub fn in_group(&self, group: ParamGroup) -> impl Iterator<Item = (&str, &Var)> {
        self.iter()
            .filter(move |(name, _)| Self::group_of(name) == Some(group))
    }

    pub fn remove_group(&mut self, group: ParamGroup) {
        self.vars.retain(|name, _| Self::group_of(name) != Some(group));
    }

    /// Copies every parameter of `group` from `other`, replacing ours.
    pub fn take_group(&mut self, other: &ParamStore, group: ParamGroup) -> Result<(), S2sError> {
        self.remove_group(group);
        for (name, var) in other.in_group(group) {
            let copy = var.as_tensor().copy()?;
            self.vars.insert(name.to_string(), Var::from_tensor(&copy)?);
        }
        Ok(())
    }

    pub fn trainable(&self, frozen: &BTreeSet<ParamGroup>) -> Vec<Var> {
        self.iter()
            .filter(|(name, _)| !Self::is_statistic(name))
            .filter(|(name, _)| Self::group_of(name).is_some_and(|g| !frozen.contains(&g)))
            .map(|(_, v)| v.clone())
            .collect()
    }
}

/// Read-only view of the store used by a forward pass. Frozen groups are
/// handed out detached so they take no part in backpropagation.
pub(crate) struct Weights<'a> {
    store: &'a ParamStore,
    frozen: &'a BTreeSet<ParamGroup>,
}

impl<'a> Weights<'a> {
    pub fn new(store: &'a ParamStore, frozen: &'a BTreeSet<ParamGroup>) -> Self {
        Self { store, frozen }
    }

    pub fn get(&self, name: &str) -> Result<Tensor, S2sError> {
        let var = self.store.var(name)?;
        let frozen = ParamStore::is_statistic(name)
            || ParamStore::group_of(name).is_some_and(|g| self.frozen.contains(&g));
        Ok(if frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }
}

/// Seeded parameter initialization.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<(), S2sError> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(self.rng) as f32).collect();
        self.store.insert(name, data, shape)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f32) -> Result<(), S2sError> {
        let n: usize = shape.iter().product();
        self.store.insert(name, vec![value; n], shape)
    }

    /// Weight stored as `(in, out)` plus a zero bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<(), S2sError> {
        self.normal(format!("{prefix}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt())?;
        self.constant(format!("{prefix}.b"), &[fan_out], 0.0)
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) -> Result<(), S2sError> {
        self.constant(format!("{prefix}.g"), &[dim], 1.0)?;
        self.constant(format!("{prefix}.b"), &[dim], 0.0)
    }

    /// Width-3 convolution, stored as a `(3 * in, out)` matrix.
    pub fn conv3(&mut self, prefix: &str, c_in: usize, c_out: usize) -> Result<(), S2sError> {
        self.linear(prefix, 3 * c_in, c_out)
    }

    pub fn block(&mut self, prefix: &str, hidden: usize) -> Result<(), S2sError> {
        self.layer_norm(&format!("{prefix}.ln1"), hidden)?;
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.attn.{p}"), hidden, hidden)?;
        }
        self.layer_norm(&format!("{prefix}.ln2"), hidden)?;
        self.conv3(&format!("{prefix}.ff1"), hidden, 2 * hidden)?;
        self.linear(&format!("{prefix}.ff2"), 2 * hidden, hidden)
    }

    pub fn stats(&mut self, prefix: &str, mean: Vec<f32>, std: Vec<f32>) -> Result<(), S2sError> {
        let dim = mean.len();
        self.store.insert(format!("{prefix}.norm_stats.mean"), mean, &[dim])?;
        self.store.insert(format!("{prefix}.norm_stats.std"), std, &[dim])
    }
}

/// Per-call dropout masks drawn from a seeded generator.
pub(crate) struct Dropout<'a> {
    pub p: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Dropout<'static> {
        Dropout { p: 0.0, rng: None }
    }

    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor, S2sError> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x.clone());
        };
        if self.p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.p;
        let scale = (1.0 / keep) as f32;
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
        Ok(x.mul(&mask)?)
    }
}

pub(crate) fn linear(w: &Weights, prefix: &str, x: &Tensor) -> Result<Tensor, S2sError> {
    let weight = w.get(&format!("{prefix}.w"))?;
    let bias = w.get(&format!("{prefix}.b"))?;
    Ok(x.matmul(&weight)?.broadcast_add(&bias)?)
}

pub(crate) fn layer_norm(w: &Weights, prefix: &str, x: &Tensor) -> Result<Tensor, S2sError> {
    let g = w.get(&format!("{prefix}.g"))?;
    let b = w.get(&format!("{prefix}.b"))?;
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(&g)?.broadcast_add(&b)?)
}

/// Zero-padded width-3 convolution over the time axis of a `(T, C)` input.
pub(crate) fn conv3(w: &Weights, prefix: &str, x: &Tensor) -> Result<Tensor, S2sError> {
    let t = x.dim(0)?;
    let padded = x.pad_with_zeros(0, 1, 1)?;
    let taps = Tensor::cat(
        &[padded.narrow(0, 0, t)?, padded.narrow(0, 1, t)?, padded.narrow(0, 2, t)?],
        1,
    )?;
    linear(w, prefix, &taps)
}

pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor, S2sError> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub(crate) fn attention(
    w: &Weights,
    prefix: &str,
    x: &Tensor,
    heads: usize,
) -> Result<Tensor, S2sError> {
    let (t, h) = x.dims2()?;
    let dh = h / heads;
    let split = |name: &str| -> Result<Tensor, S2sError> {
        Ok(linear(w, &format!("{prefix}.{name}"), x)?
            .reshape((t, heads, dh))?
            .transpose(0, 1)?
            .contiguous()?)
    };
    let (q, k, v) = (split("q")?, split("k")?, split("v")?);
    let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
    let att = softmax_last(&scores)?;
    let out = att.matmul(&v)?.transpose(0, 1)?.reshape((t, h))?;
    linear(w, &format!("{prefix}.o"), &out)
}

/// Pre-norm self-attention plus convolutional feed-forward.
pub(crate) fn block(
    w: &Weights,
    prefix: &str,
    x: &Tensor,
    heads: usize,
    dropout: &mut Dropout,
) -> Result<Tensor, S2sError> {
    let a = attention(w, &format!("{prefix}.attn"), &layer_norm(w, &format!("{prefix}.ln1"), x)?, heads)?;
    let x = (x + dropout.apply(&a)?)?;
    let f = conv3(w, &format!("{prefix}.ff1"), &layer_norm(w, &format!("{prefix}.ln2"), &x)?)?.relu()?;
    let f = linear(w, &format!("{prefix}.ff2"), &f)?;
    Ok((&x + dropout.apply(&f)?)?)
}

pub(crate) fn positional_encoding(t: usize, dim: usize) -> Result<Tensor, S2sError> {
    let mut data = vec![0f32; t * dim];
    for pos in 0..t {
        for i in 0..dim {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    Ok(Tensor::from_vec(data, (t, dim), &Device::Cpu)?)
}

pub(crate) fn normalize(w: &Weights, prefix: &str, x: &Tensor) -> Result<Tensor, S2sError> {
    let mean = w.get(&format!("{prefix}.norm_stats.mean"))?;
    let std = w.get(&format!("{prefix}.norm_stats.std"))?;
    Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
}

pub(crate) fn denormalize(w: &Weights, prefix: &str, x: &Tensor) -> Result<Tensor, S2sError> {
    let mean = w.get(&format!("{prefix}.norm_stats.mean"))?;
    let std = w.get(&format!("{prefix}.norm_stats.std"))?;
    Ok(x.broadcast_mul(&std)?.broadcast_add(&mean)?)
}

/// Per-dimension mean and standard deviation over all frames, with the
/// deviation floored so constant dimensions stay finite.
pub(crate) fn feature_stats<'a>(
    seqs: impl Iterator<Item = &'a ndarray::Array2<f32>>,
    dim: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut sum = vec![0f64; dim];
    let mut sq = vec![0f64; dim];
    let mut n = 0usize;
    for s in seqs {
        for row in s.rows() {
            for (k, v) in row.iter().enumerate() {
                sum[k] += *v as f64;
                sq[k] += (*v as f64) * (*v as f64);
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt().max(1e-2)) as f32)
        .collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

pub(crate) fn to_tensor(x: &ndarray::Array2<f32>) -> Result<Tensor, S2sError> {
    let (t, d) = x.dim();
    let data = x.as_standard_layout().iter().copied().collect::<Vec<_>>();
    Ok(Tensor::from_vec(data, (t, d), &Device::Cpu)?)
}

pub(crate) fn to_array(x: &Tensor) -> Result<ndarray::Array2<f32>, S2sError> {
    let (t, d) = x.dims2()?;
    let data = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(ndarray::Array2::from_shape_vec((t, d), data).expect("shape matches"))
}
