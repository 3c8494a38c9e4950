use serde::{Deserialize, Serialize};

use super::AlignError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

/// Distance between two feature rows.
///
/// Cosine distance is `1 - cos(p, q)`, clamped to `[0, 2]`. Two all-zero rows
/// are at distance 0; a zero row against a nonzero row counts as orthogonal.
pub fn frame_distance(p: &[f32], q: &[f32], metric: Metric) -> Result<f64, AlignError> {
    if p.len() != q.len() {
        return Err(AlignError::DimMismatch(p.len(), q.len()));
    }
    Ok(match metric {
        Metric::Euclidean => p
            .iter()
            .zip(q)
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt(),
        Metric::Cosine => {
            let (mut dot, mut pp, mut qq) = (0.0f64, 0.0f64, 0.0f64);
            for (a, b) in p.iter().zip(q) {
                let (a, b) = (*a as f64, *b as f64);
                dot += a * b;
                pp += a * a;
                qq += b * b;
            }
            if pp == 0.0 && qq == 0.0 {
                0.0
            } else if pp == 0.0 || qq == 0.0 {
                1.0
            } else {
                (1.0 - dot / (pp.sqrt() * qq.sqrt())).clamp(0.0, 2.0)
            }
        }
    })
}
