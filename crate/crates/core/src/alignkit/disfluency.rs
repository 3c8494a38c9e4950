use serde::{Deserialize, Serialize};

use super::{dtw, frame_distance, AlignError, AlignmentPath, Metric};
use crate::alignkit::cost_matrix;
use crate::data::FeatureSequence;

/// Distances at or below this are treated as identical frames.
pub const DISTANCE_FLOOR: f64 = 1e-6;

/// Per-step distances along the DTW path between a first shadowing and the
/// script-shadowing, with steps above `threshold` flagged as breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisfluencyProfile {
    pub metric: Metric,
    pub threshold: f64,
    pub path: AlignmentPath,
    pub per_step_distance: Vec<f64>,
    pub segment_flags: Vec<bool>,
}

impl DisfluencyProfile {
    pub fn num_flagged(&self) -> usize {
        self.segment_flags.iter().filter(|f| **f).count()
    }

    /// Flags projected onto the first sequence's frames: a frame is flagged
    /// if any path step touching it is.
    pub fn flagged_source_frames(&self, src_len: usize) -> Vec<bool> {
        let mut out = vec![false; src_len];
        for (&(i, _), &flag) in self.path.steps.iter().zip(&self.segment_flags) {
            out[i] |= flag;
        }
        out
    }
}

pub fn disfluency_profile(
    s1: &FeatureSequence,
    ss: &FeatureSequence,
    metric: Metric,
    threshold: f64,
) -> Result<DisfluencyProfile, AlignError> {
    if threshold.is_nan() {
        return Err(AlignError::InvalidScores("threshold is NaN".into()));
    }
    let path = dtw(&cost_matrix(s1, ss, metric)?)?;
    let per_step_distance = path
        .steps
        .iter()
        .map(|&(i, j)| frame_distance(s1.row(i), ss.row(j), metric))
        .collect::<Result<Vec<_>, _>>()?;
    let segment_flags = per_step_distance.iter().map(|d| *d > threshold).collect();
    Ok(DisfluencyProfile {
        metric,
        threshold,
        path,
        per_step_distance,
        segment_flags,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `mean + k * std` of the distances, floored at [`DISTANCE_FLOOR`].
pub fn mean_plus_k_std(distances: &[f64], k: f64) -> f64 {
    if distances.is_empty() {
        return DISTANCE_FLOOR;
    }
    let (mean, std) = mean_std(distances);
    (mean + k * std).max(DISTANCE_FLOOR)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// `mean + k * std` of the fluent steps only.
///
/// Starts from the robust estimate `median + k * 1.4826 * MAD`, then keeps
/// the steps at or below the current threshold and recomputes mean and std
/// until the inlier set stops changing. Breakdown steps are excluded as long
/// as they are a minority.
pub fn clipped_threshold(distances: &[f64], k: f64) -> f64 {
    if distances.is_empty() {
        return DISTANCE_FLOOR;
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let mut dev: Vec<f64> = sorted.iter().map(|d| (d - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let mut threshold = (med + k * 1.4826 * median(&dev)).max(DISTANCE_FLOOR);
    let mut inliers: Vec<f64> = Vec::new();
    for _ in 0..100 {
        let next: Vec<f64> = distances.iter().copied().filter(|d| *d <= threshold).collect();
        if next.len() == inliers.len() || next.is_empty() {
            break;
        }
        inliers = next;
        threshold = mean_plus_k_std(&inliers, k);
    }
    threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ThresholdRule {
    Fixed { value: f64 },
    MeanPlusKStd { k: f64 },
    ClippedMeanPlusKStd { k: f64 },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::ClippedMeanPlusKStd { k: 2.0 }
    }
}

impl ThresholdRule {
    /// Resolves the rule against pooled per-step distances (usually the dev
    /// split's).
    pub fn resolve(&self, distances: &[f64]) -> f64 {
        match *self {
            ThresholdRule::Fixed { value } => value,
            ThresholdRule::MeanPlusKStd { k } => mean_plus_k_std(distances, k),
            ThresholdRule::ClippedMeanPlusKStd { k } => clipped_threshold(distances, k),
        }
    }
}
