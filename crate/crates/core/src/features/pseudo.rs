//! Deterministic stand-in for learned speech embedders: a fixed seeded
//! projection of log-mel frames.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{extract_mel, FeatureError, MelConfig, Waveform};
use crate::data::{FeatureKind, FeatureSequence};

/// Fixed input standardization applied to log-mel values before projection.
pub const MEL_CENTER: f32 = -5.0;
pub const MEL_SCALE: f32 = 2.5;

/// `dim x in_dim` projection with unit-norm rows, a pure function of the seed.
pub fn projection_matrix(in_dim: usize, dim: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::<f32>::zeros((dim, in_dim));
    for mut row in w.rows_mut() {
        for v in row.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::EPSILON);
        row.mapv_inplace(|v| v / norm);
    }
    w
}

/// Applies the seeded projection framewise to an existing log-mel sequence.
pub fn project_mel(
    mel: &FeatureSequence,
    dim: usize,
    seed: u64,
    kind: FeatureKind,
) -> Result<FeatureSequence, FeatureError> {
    if dim == 0 {
        return Err(FeatureError::Config("embedding dim must be positive".into()));
    }
    let w = projection_matrix(mel.dim(), dim, seed);
    let x = mel.data().mapv(|v| (v - MEL_CENTER) / MEL_SCALE);
    let out = x.dot(&w.t());
    Ok(FeatureSequence::new(out, mel.stride_ms(), kind)?)
}

/// Seeded projection (80 -> dim) of the waveform's log-mel frames.
pub fn pseudo_embed(w: &Waveform, dim: usize, seed: u64) -> Result<FeatureSequence, FeatureError> {
    pseudo_embed_with(w, dim, seed, &MelConfig::default(), FeatureKind::Other)
}

pub(crate) fn pseudo_embed_with(
    w: &Waveform,
    dim: usize,
    seed: u64,
    mel_config: &MelConfig,
    kind: FeatureKind,
) -> Result<FeatureSequence, FeatureError> {
    let mel = extract_mel(w, mel_config)?;
    project_mel(&mel, dim, seed, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chirp() -> Waveform {
        let samples = (0..8000)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                (0.4 * (std::f64::consts::TAU * (200.0 + 600.0 * t) * t).sin()) as f32
            })
            .collect();
        Waveform::new(samples, 16_000).unwrap()
    }

    #[test]
    fn deterministic() {
        let w = chirp();
        assert_eq!(pseudo_embed(&w, 32, 4).unwrap(), pseudo_embed(&w, 32, 4).unwrap());
    }

    #[test]
    fn ppg_shaped_stand_in() {
        let w = chirp();
        let e = pseudo_embed(&w, 144, 1).unwrap();
        let mel = extract_mel(&w, &MelConfig::default()).unwrap();
        assert_eq!(e.dim(), 144);
        assert_eq!(e.num_frames(), mel.num_frames());
        assert!(e.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn seeds_differ_on_non_silent_input() {
        let w = chirp();
        let a = pseudo_embed(&w, 16, 1).unwrap();
        let b = pseudo_embed(&w, 16, 2).unwrap();
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn rows_equal_projection_of_mel_frames() {
        let w = chirp();
        let mel = extract_mel(&w, &MelConfig::default()).unwrap();
        let e = pseudo_embed(&w, 8, 9).unwrap();
        let p = projection_matrix(80, 8, 9);
        for t in [0, 7, mel.num_frames() - 1] {
            for d in 0..8 {
                let expected: f32 = (0..80)
                    .map(|k| p[[d, k]] * (mel.row(t)[k] - MEL_CENTER) / MEL_SCALE)
                    .sum();
                assert!((e.row(t)[d] - expected).abs() < 1e-4);
            }
        }
    }
}
