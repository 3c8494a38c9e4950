//! Dynamic-programming alignment kernels.
//!
//! All kernels work on dense `T_src x T_tgt` score matrices in `f64` and are
//! pure functions.

mod disfluency;
mod distance;
mod dtw;
mod forward_sum;
mod mas;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use disfluency::{
    clipped_threshold, disfluency_profile, mean_plus_k_std, DisfluencyProfile, ThresholdRule,
};
pub use distance::{frame_distance, Metric};
pub use dtw::{cost_matrix, dtw, dtw_align_features};
pub use forward_sum::{forward_sum, forward_sum_with_grad, log_softmax_columns};
pub use mas::{durations_from_path, mas};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AlignError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("score matrix is empty")]
    Empty,
    #[error("no monotonic alignment: {src} source frames cannot cover {tgt} target frames")]
    Infeasible { src: usize, tgt: usize },
    #[error("invalid score matrix: {0}")]
    InvalidScores(String),
    #[error("expected a {expected:?} matrix, got {actual:?}")]
    WrongSemantics {
        expected: Semantics,
        actual: Semantics,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Semantics {
    /// Nonnegative local costs; lower is better (DTW).
    Cost,
    /// Log-likelihoods; higher is better (MAS, forward-sum).
    LogLikelihood,
}

/// A dense `T_src x T_tgt` lattice of finite scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    values: Array2<f64>,
    semantics: Semantics,
}

impl ScoreMatrix {
    pub fn new(values: Array2<f64>, semantics: Semantics) -> Result<Self, AlignError> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(AlignError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AlignError::InvalidScores("non-finite entry".into()));
        }
        Ok(Self { values, semantics })
    }

    pub fn cost(values: Array2<f64>) -> Result<Self, AlignError> {
        Self::new(values, Semantics::Cost)
    }

    pub fn log_likelihood(values: Array2<f64>) -> Result<Self, AlignError> {
        Self::new(values, Semantics::LogLikelihood)
    }

    pub fn from_rows(rows: &[&[f64]], semantics: Semantics) -> Result<Self, AlignError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AlignError::InvalidScores("ragged rows".into()));
        }
        let flat = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let values = Array2::from_shape_vec((rows.len(), cols), flat)
            .map_err(|e| AlignError::InvalidScores(e.to_string()))?;
        Self::new(values, semantics)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn semantics(&self) -> Semantics {
        self.semantics
    }

    pub fn src_len(&self) -> usize {
        self.values.nrows()
    }

    pub fn tgt_len(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    fn expect(&self, semantics: Semantics) -> Result<(), AlignError> {
        if self.semantics != semantics {
            return Err(AlignError::WrongSemantics {
                expected: semantics,
                actual: self.semantics,
            });
        }
        Ok(())
    }
}

/// A monotonic sequence of `(source, target)` index pairs from `(0, 0)` to
/// `(T_src - 1, T_tgt - 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPath {
    pub steps: Vec<(usize, usize)>,
    pub total_score: f64,
}

impl AlignmentPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Checks endpoints, monotonicity and that every move is one of `moves`
    /// (given as `(di, dj)` increments).
    pub fn is_valid(&self, src_len: usize, tgt_len: usize, moves: &[(usize, usize)]) -> bool {
        if self.steps.first() != Some(&(0, 0))
            || self.steps.last() != Some(&(src_len - 1, tgt_len - 1))
        {
            return false;
        }
        self.steps.windows(2).all(|w| {
            let (a, b) = (w[0], w[1]);
            b.0 >= a.0 && b.1 >= a.1 && moves.contains(&(b.0 - a.0, b.1 - a.1))
        })
    }
}

pub const DTW_MOVES: [(usize, usize); 3] = [(1, 1), (1, 0), (0, 1)];
pub const MAS_MOVES: [(usize, usize); 2] = [(0, 1), (1, 1)];
