use ndarray::Array2;

use super::{frame_distance, AlignError, AlignmentPath, Metric, ScoreMatrix, Semantics};
use crate::data::FeatureSequence;

#[derive(Clone, Copy)]
enum Move {
    Start,
    Diagonal,
    Vertical,
    Horizontal,
}

/// Minimum-cost monotonic path with moves (1,1), (1,0), (0,1).
///
/// Ties prefer the diagonal, then the vertical move (advance source), then
/// the horizontal one.
pub fn dtw(cost: &ScoreMatrix) -> Result<AlignmentPath, AlignError> {
    cost.expect(Semantics::Cost)?;
    if cost.values().iter().any(|v| *v < 0.0) {
        return Err(AlignError::InvalidScores("DTW costs must be nonnegative".into()));
    }
    let (rows, cols) = (cost.src_len(), cost.tgt_len());
    let mut acc = Array2::<f64>::from_elem((rows, cols), f64::INFINITY);
    let mut back = Array2::from_elem((rows, cols), Move::Start);
    for i in 0..rows {
        for j in 0..cols {
            let c = cost.get(i, j);
            if i == 0 && j == 0 {
                acc[[0, 0]] = c;
                continue;
            }
            let mut best = (f64::INFINITY, Move::Start);
            if i > 0 && j > 0 {
                best = (acc[[i - 1, j - 1]], Move::Diagonal);
            }
            if i > 0 && acc[[i - 1, j]] < best.0 {
                best = (acc[[i - 1, j]], Move::Vertical);
            }
            if j > 0 && acc[[i, j - 1]] < best.0 {
                best = (acc[[i, j - 1]], Move::Horizontal);
            }
            acc[[i, j]] = best.0 + c;
            back[[i, j]] = best.1;
        }
    }

    let mut steps = Vec::with_capacity(rows + cols);
    let (mut i, mut j) = (rows - 1, cols - 1);
    loop {
        steps.push((i, j));
        match back[[i, j]] {
            Move::Start => break,
            Move::Diagonal => {
                i -= 1;
                j -= 1;
            }
            Move::Vertical => i -= 1,
            Move::Horizontal => j -= 1,
        }
    }
    steps.reverse();
    Ok(AlignmentPath {
        steps,
        total_score: acc[[rows - 1, cols - 1]],
    })
}

/// Pairwise frame-distance matrix between two sequences.
pub fn cost_matrix(
    a: &FeatureSequence,
    b: &FeatureSequence,
    metric: Metric,
) -> Result<ScoreMatrix, AlignError> {
    if a.dim() != b.dim() {
        return Err(AlignError::DimMismatch(a.dim(), b.dim()));
    }
    let mut values = Array2::<f64>::zeros((a.num_frames(), b.num_frames()));
    for i in 0..a.num_frames() {
        let row = a.row(i);
        for j in 0..b.num_frames() {
            values[[i, j]] = frame_distance(row, b.row(j), metric)?;
        }
    }
    ScoreMatrix::cost(values)
}

pub fn dtw_align_features(
    a: &FeatureSequence,
    b: &FeatureSequence,
    metric: Metric,
) -> Result<AlignmentPath, AlignError> {
    dtw(&cost_matrix(a, b, metric)?)
}
