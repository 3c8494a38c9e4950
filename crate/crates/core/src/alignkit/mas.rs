use ndarray::Array2;

use super::{AlignError, AlignmentPath, ScoreMatrix, Semantics};

/// Monotonic alignment search.
///
/// Every target frame `j` is assigned one source frame `a_j` with `a_0 = 0`,
/// `a_last = T_src - 1` and `a_{j+1} - a_j` in `{0, 1}`; the returned path
/// maximizes the summed log-likelihood. On exact ties the path stays on the
/// current source frame rather than advancing.
pub fn mas(loglik: &ScoreMatrix) -> Result<AlignmentPath, AlignError> {
    loglik.expect(Semantics::LogLikelihood)?;
    let (src, tgt) = (loglik.src_len(), loglik.tgt_len());
    if tgt < src {
        return Err(AlignError::Infeasible { src, tgt });
    }
    let q = accumulate(loglik);

    let mut steps = vec![(0, 0); tgt];
    let mut i = src - 1;
    for j in (0..tgt).rev() {
        steps[j] = (i, j);
        if j == 0 {
            break;
        }
        if i > 0 && (i == j || q[[i - 1, j - 1]] > q[[i, j - 1]]) {
            i -= 1;
        }
    }
    debug_assert_eq!(i, 0);
    Ok(AlignmentPath {
        steps,
        total_score: q[[src - 1, tgt - 1]],
    })
}

fn accumulate(loglik: &ScoreMatrix) -> Array2<f64> {
    let (src, tgt) = (loglik.src_len(), loglik.tgt_len());
    let mut q = Array2::from_elem((src, tgt), f64::NEG_INFINITY);
    for j in 0..tgt {
        // source frames reachable at column j
        let lo = (src + j).saturating_sub(tgt);
        let hi = j.min(src - 1);
        for i in lo..=hi {
            let prev = if j == 0 {
                0.0
            } else {
                let stay = q[[i, j - 1]];
                let advance = if i > 0 { q[[i - 1, j - 1]] } else { f64::NEG_INFINITY };
                stay.max(advance)
            };
            q[[i, j]] = prev + loglik.get(i, j);
        }
    }
    q
}

/// Number of target frames assigned to each source frame.
pub fn durations_from_path(path: &AlignmentPath, src_len: usize) -> Vec<usize> {
    let mut durations = vec![0; src_len];
    for &(i, _) in &path.steps {
        durations[i] += 1;
    }
    durations
}
