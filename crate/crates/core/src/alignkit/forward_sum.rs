//! Blank-free CTC-style forward-sum over the monotonic alignment lattice.

use ndarray::Array2;

use super::{AlignError, ScoreMatrix, Semantics};

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log-softmax over the source axis of every target column.
pub fn log_softmax_columns(values: &Array2<f64>) -> Array2<f64> {
    let mut out = values.clone();
    for mut col in out.columns_mut() {
        let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        col.mapv_inplace(|v| v - lse);
    }
    out
}

struct Lattice {
    normalized: Array2<f64>,
    alpha: Array2<f64>,
}

fn forward(loglik: &ScoreMatrix) -> Result<Lattice, AlignError> {
    loglik.expect(Semantics::LogLikelihood)?;
    let (src, tgt) = (loglik.src_len(), loglik.tgt_len());
    if tgt < src {
        return Err(AlignError::Infeasible { src, tgt });
    }
    let x = log_softmax_columns(loglik.values());
    let mut alpha = Array2::from_elem((src, tgt), f64::NEG_INFINITY);
    alpha[[0, 0]] = x[[0, 0]];
    for j in 1..tgt {
        for i in 0..src.min(j + 1) {
            let stay = alpha[[i, j - 1]];
            let advance = if i > 0 { alpha[[i - 1, j - 1]] } else { f64::NEG_INFINITY };
            let prev = log_add_exp(stay, advance);
            if prev > f64::NEG_INFINITY {
                alpha[[i, j]] = prev + x[[i, j]];
            }
        }
    }
    Ok(Lattice {
        normalized: x,
        alpha,
    })
}

/// `-log sum_paths exp(score) / T_tgt` after column-wise log-softmax.
pub fn forward_sum(loglik: &ScoreMatrix) -> Result<f64, AlignError> {
    let lattice = forward(loglik)?;
    let (src, tgt) = (loglik.src_len(), loglik.tgt_len());
    Ok(-lattice.alpha[[src - 1, tgt - 1]] / tgt as f64)
}

/// Loss together with its gradient with respect to the raw (pre-softmax)
/// scores.
///
/// With occupancy `gamma[i, j]` (posterior probability that target frame `j`
/// sits on source frame `i`) and column softmax `p`, the gradient is
/// `(p - gamma) / T_tgt`; columns of `gamma` sum to one.
pub fn forward_sum_with_grad(loglik: &ScoreMatrix) -> Result<(f64, Array2<f64>), AlignError> {
    let Lattice { normalized: x, alpha } = forward(loglik)?;
    let (src, tgt) = (loglik.src_len(), loglik.tgt_len());
    let log_z = alpha[[src - 1, tgt - 1]];

    // beta[i, j]: log-sum over completions after (i, j), excluding x[i, j]
    let mut beta = Array2::from_elem((src, tgt), f64::NEG_INFINITY);
    beta[[src - 1, tgt - 1]] = 0.0;
    for j in (0..tgt - 1).rev() {
        for i in 0..src {
            let stay = beta[[i, j + 1]] + x[[i, j + 1]];
            let advance = if i + 1 < src {
                beta[[i + 1, j + 1]] + x[[i + 1, j + 1]]
            } else {
                f64::NEG_INFINITY
            };
            beta[[i, j]] = log_add_exp(stay, advance);
        }
    }

    let scale = 1.0 / tgt as f64;
    let mut grad = Array2::<f64>::zeros((src, tgt));
    for i in 0..src {
        for j in 0..tgt {
            let occupancy = if alpha[[i, j]] == f64::NEG_INFINITY {
                0.0
            } else {
                (alpha[[i, j]] + beta[[i, j]] - log_z).exp()
            };
            grad[[i, j]] = (x[[i, j]].exp() - occupancy) * scale;
        }
    }
    Ok((-log_z * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_is_zero() {
        let m = ScoreMatrix::from_rows(&[&[3.7]], Semantics::LogLikelihood).unwrap();
        assert_eq!(forward_sum(&m).unwrap(), 0.0);
    }

    #[test]
    fn single_row_is_zero() {
        let m = ScoreMatrix::from_rows(&[&[1.0, -4.0, 0.3, 2.0]], Semantics::LogLikelihood)
            .unwrap();
        assert!(forward_sum(&m).unwrap().abs() < 1e-15);
    }

    #[test]
    fn square_uniform_lattice() {
        // one feasible path; every column softmax is uniform over 3 rows
        let m = ScoreMatrix::log_likelihood(Array2::zeros((3, 3))).unwrap();
        assert!((forward_sum(&m).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible() {
        let m = ScoreMatrix::log_likelihood(Array2::zeros((4, 3))).unwrap();
        assert!(matches!(forward_sum(&m), Err(AlignError::Infeasible { .. })));
    }

    #[test]
    fn occupancy_columns_sum_to_one() {
        let values = Array2::from_shape_fn((3, 6), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let m = ScoreMatrix::log_likelihood(values).unwrap();
        let (loss, grad) = forward_sum_with_grad(&m).unwrap();
        assert!((loss - forward_sum(&m).unwrap()).abs() < 1e-12);
        // p sums to 1 and gamma sums to 1 in each column, so grads sum to 0
        for col in grad.columns() {
            assert!(col.sum().abs() < 1e-12);
        }
    }
}
