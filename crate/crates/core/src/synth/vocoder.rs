//! Mel-to-waveform backends.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex32;

use super::SynthError;
use crate::data::FeatureSequence;
use crate::features::{BackendEntry, MelConfig, MelFilterbank, Stft, Waveform};

pub trait Vocoder: Send + Sync {
    fn id(&self) -> &str;

    fn vocode(&self, mel: &FeatureSequence) -> Result<Waveform, SynthError>;
}

/// Iterative phase reconstruction from log-mel frames. Linear magnitudes
/// come from the pseudo-inverse of the mel filterbank.
pub struct GriffinLim {
    config: MelConfig,
    iterations: usize,
    seed: u64,
    inverse_fb: DMatrix<f32>,
}

pub const DEFAULT_GRIFFIN_LIM_ITERATIONS: usize = 32;

impl GriffinLim {
    pub fn new(config: MelConfig, iterations: usize, seed: u64) -> Result<Self, SynthError> {
        config.validate()?;
        let fb = MelFilterbank::new(&config);
        let w = fb.weights();
        let m = DMatrix::from_fn(w.nrows(), w.ncols(), |r, c| w[[r, c]] as f64);
        let pinv = m
            .pseudo_inverse(1e-6)
            .map_err(|e| SynthError::Config(format!("filterbank pseudo-inverse: {e}")))?;
        Ok(Self {
            config,
            iterations,
            seed,
            inverse_fb: pinv.map(|v| v as f32),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    fn magnitudes(&self, mel: &FeatureSequence) -> Vec<Vec<f32>> {
        let n_bins = self.inverse_fb.nrows();
        (0..mel.num_frames())
            .map(|t| {
                let lin: Vec<f32> = mel.row(t).iter().map(|v| v.exp()).collect();
                (0..n_bins)
                    .map(|k| {
                        let row = self.inverse_fb.row(k);
                        row.iter().zip(&lin).map(|(a, b)| a * b).sum::<f32>().max(0.0)
                    })
                    .collect()
            })
            .collect()
    }
}

impl Vocoder for GriffinLim {
    fn id(&self) -> &str {
        "griffin_lim"
    }

    fn vocode(&self, mel: &FeatureSequence) -> Result<Waveform, SynthError> {
        if mel.dim() != self.config.n_mels {
            return Err(SynthError::DimMismatch {
                expected: self.config.n_mels,
                actual: mel.dim(),
            });
        }
        if (mel.stride_ms() - self.config.stride_ms).abs() > 1e-9 {
            return Err(SynthError::Config(format!(
                "mel stride {} ms, vocoder expects {} ms",
                mel.stride_ms(),
                self.config.stride_ms
            )));
        }
        let stft = Stft::new(&self.config);
        let mags = self.magnitudes(mel);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut spectra: Vec<Vec<Complex32>> = mags
            .iter()
            .map(|frame| {
                frame
                    .iter()
                    .map(|a| Complex32::from_polar(*a, rng.gen_range(0.0..std::f32::consts::TAU)))
                    .collect()
            })
            .collect();
        let mut signal = stft.inverse(&spectra);
        for _ in 0..self.iterations {
            let rebuilt = stft.forward(&signal);
            for ((frame, mag), est) in spectra.iter_mut().zip(&mags).zip(&rebuilt) {
                for ((slot, a), e) in frame.iter_mut().zip(mag).zip(est) {
                    let n = e.norm();
                    *slot = if n > 1e-12 {
                        e * (*a / n)
                    } else {
                        Complex32::new(*a, 0.0)
                    };
                }
            }
            signal = stft.inverse(&spectra);
        }
        Ok(Waveform::normalized(signal, self.config.sample_rate_hz)?)
    }
}

/// Slot for a neural vocoder served outside this crate.
pub struct ExternalVocoder {
    pub backend: String,
    pub checkpoint: Option<std::path::PathBuf>,
}

impl Vocoder for ExternalVocoder {
    fn id(&self) -> &str {
        &self.backend
    }

    fn vocode(&self, _mel: &FeatureSequence) -> Result<Waveform, SynthError> {
        Err(SynthError::Backend {
            backend: self.backend.clone(),
            cause: format!(
                "no runtime for external vocoders is linked into this build (checkpoint {})",
                self.checkpoint
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "unset".into())
            ),
        })
    }
}

/// Builds the configured vocoder; no entry means the Griffin-Lim fallback.
pub fn vocoder_from_entry(
    entry: Option<&BackendEntry>,
    mel: &MelConfig,
) -> Result<Box<dyn Vocoder>, SynthError> {
    match entry {
        None => Ok(Box::new(GriffinLim::new(mel.clone(), DEFAULT_GRIFFIN_LIM_ITERATIONS, 0)?)),
        Some(e) if e.backend == "griffin_lim" => Ok(Box::new(GriffinLim::new(
            mel.clone(),
            DEFAULT_GRIFFIN_LIM_ITERATIONS,
            e.seed.unwrap_or(0),
        )?)),
        Some(e) => Ok(Box::new(ExternalVocoder {
            backend: e.backend.clone(),
            checkpoint: e.checkpoint.clone(),
        })),
    }
}
