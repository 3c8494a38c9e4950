//! Forward-sum loss as a differentiable tensor operation backed by the
//! alignkit lattice kernel.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use ndarray::Array2;

use crate::alignkit::{forward_sum_with_grad, ScoreMatrix};

pub(crate) struct ForwardSumLoss;

fn scores_from(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<ScoreMatrix> {
    let (src, tgt) = layout.shape().dims2()?;
    let data = storage.as_slice::<f32>()?;
    let data = match layout.contiguous_offsets() {
        Some((start, end)) => &data[start..end],
        None => candle_core::bail!("forward-sum expects a contiguous score matrix"),
    };
    let values = Array2::from_shape_fn((src, tgt), |(i, j)| data[i * tgt + j] as f64);
    ScoreMatrix::log_likelihood(values).map_err(candle_core::Error::wrap)
}

impl CustomOp1 for ForwardSumLoss {
    fn name(&self) -> &'static str {
        "forward-sum-loss"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let scores = scores_from(storage, layout)?;
        let (loss, _) = forward_sum_with_grad(&scores).map_err(candle_core::Error::wrap)?;
        Ok((CpuStorage::F32(vec![loss as f32]), Shape::from(())))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (src, tgt) = arg.dims2()?;
        let flat = arg.flatten_all()?.to_vec1::<f32>()?;
        let values = Array2::from_shape_fn((src, tgt), |(i, j)| flat[i * tgt + j] as f64);
        let scores = ScoreMatrix::log_likelihood(values).map_err(candle_core::Error::wrap)?;
        let (_, grad) = forward_sum_with_grad(&scores).map_err(candle_core::Error::wrap)?;
        let grad: Vec<f32> = grad.iter().map(|g| *g as f32).collect();
        let grad = Tensor::from_vec(grad, (src, tgt), arg.device())?;
        Ok(Some(grad.broadcast_mul(grad_res)?))
    }
}

/// Forward-sum loss over raw (unnormalized) alignment scores.
pub(crate) fn forward_sum_loss(scores: &Tensor) -> candle_core::Result<Tensor> {
    scores.contiguous()?.apply_op1(ForwardSumLoss)
}
