//! Exhaustive reference implementations used by the integration tests.
//! Everything here enumerates paths or alignments explicitly, so it is only
//! usable on tiny inputs.

#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};

use ndarray::Array2;
use rand::Rng;

/// Every monotonic path from `(0, 0)` to `(rows-1, cols-1)` using `moves`.
pub fn enumerate_paths(rows: usize, cols: usize, moves: &[(usize, usize)]) -> Vec<Vec<(usize, usize)>> {
    fn walk(
        at: (usize, usize),
        end: (usize, usize),
        moves: &[(usize, usize)],
        path: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        path.push(at);
        if at == end {
            out.push(path.clone());
        } else {
            for &(di, dj) in moves {
                let next = (at.0 + di, at.1 + dj);
                if next.0 <= end.0 && next.1 <= end.1 {
                    walk(next, end, moves, path, out);
                }
            }
        }
        path.pop();
    }
    let mut out = Vec::new();
    walk((0, 0), (rows - 1, cols - 1), moves, &mut Vec::new(), &mut out);
    out
}

fn path_score(m: &Array2<f64>, path: &[(usize, usize)]) -> f64 {
    path.iter().map(|&(i, j)| m[[i, j]]).sum()
}

/// Minimum summed cost over all DTW paths.
pub fn dtw_brute(cost: &Array2<f64>) -> f64 {
    enumerate_paths(cost.nrows(), cost.ncols(), &[(1, 1), (1, 0), (0, 1)])
        .iter()
        .map(|p| path_score(cost, p))
        .fold(f64::INFINITY, f64::min)
}

/// Maximum summed log-likelihood over all monotonic alignments where each
/// target column advances the source by 0 or 1.
pub fn mas_brute(loglik: &Array2<f64>) -> f64 {
    enumerate_paths(loglik.nrows(), loglik.ncols(), &[(0, 1), (1, 1)])
        .iter()
        .map(|p| path_score(loglik, p))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `-log sum_paths exp(score) / T_tgt` after column log-softmax, summed
/// path by path.
pub fn forward_sum_brute(raw: &Array2<f64>) -> f64 {
    let mut x = raw.clone();
    for mut col in x.columns_mut() {
        let z: f64 = col.iter().map(|v| v.exp()).sum();
        col.mapv_inplace(|v| v - z.ln());
    }
    let scores: Vec<f64> = enumerate_paths(x.nrows(), x.ncols(), &[(0, 1), (1, 1)])
        .iter()
        .map(|p| path_score(&x, p))
        .collect();
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    -lse / x.ncols() as f64
}

/// Minimal number of insertions, deletions and substitutions from `a` to
/// every string of length at most `max_len`, by breadth-first search over
/// single edits. Some optimal edit script never exceeds the longer of the
/// two lengths, so capping the search space keeps distances exact.
pub fn edit_distances_bfs(a: &[u8], alphabet: &[u8], max_len: usize) -> HashMap<Vec<u8>, usize> {
    let mut dist = HashMap::from([(a.to_vec(), 0usize)]);
    let mut queue = VecDeque::from([a.to_vec()]);
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        let mut next = Vec::new();
        for k in 0..s.len() {
            let mut del = s.clone();
            del.remove(k);
            next.push(del);
            for &c in alphabet {
                if c != s[k] {
                    let mut sub = s.clone();
                    sub[k] = c;
                    next.push(sub);
                }
            }
        }
        if s.len() < max_len {
            for k in 0..=s.len() {
                for &c in alphabet {
                    let mut ins = s.clone();
                    ins.insert(k, c);
                    next.push(ins);
                }
            }
        }
        for n in next {
            if !dist.contains_key(&n) {
                dist.insert(n.clone(), d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Every string over `alphabet` of length at most `max_len`.
pub fn all_strings(alphabet: &[u8], max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|s: &Vec<u8>| {
                alphabet.iter().map(move |&c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

/// Nested-loop SpeechBERTScore: mean over generated rows of the best cosine
/// against any reference row, zero rows scoring 0.
pub fn sbs_nested(gen: &Array2<f32>, reference: &Array2<f32>) -> f64 {
    let mut total = 0.0;
    for i in 0..gen.nrows() {
        let mut best = f64::NEG_INFINITY;
        for j in 0..reference.nrows() {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for k in 0..gen.ncols() {
                let (x, y) = (gen[[i, k]] as f64, reference[[j, k]] as f64);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            let c = if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na.sqrt() * nb.sqrt())
            };
            best = best.max(c);
        }
        total += best;
    }
    total / gen.nrows() as f64
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}
