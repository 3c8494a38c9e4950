//! Log-mel analysis.
//!
//! Frame `t` is centred on sample `t * hop` (reflect padding at the edges)
//! and a waveform of `N` samples yields `floor(N / hop)` frames, so a 20 ms
//! stride gives exactly 50 frames per second.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{FeatureError, Waveform};
use crate::data::{FeatureKind, FeatureSequence};

/// Analysis parameters. Everything not fixed by the 80-bin / 20 ms contract
/// is pinned here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub stride_ms: f64,
    /// Hann window length.
    pub window_ms: f64,
    pub n_mels: usize,
    pub fmin_hz: f64,
    /// Defaults to Nyquist.
    pub fmax_hz: Option<f64>,
    /// Magnitudes are clamped to this before the natural log.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            stride_ms: 20.0,
            window_ms: 50.0,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: None,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn hop_length(&self) -> usize {
        (self.sample_rate_hz as f64 * self.stride_ms / 1000.0).round() as usize
    }

    pub fn win_length(&self) -> usize {
        (self.sample_rate_hz as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn n_fft(&self) -> usize {
        self.win_length().next_power_of_two()
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft() / 2 + 1
    }

    pub fn fmax(&self) -> f64 {
        self.fmax_hz.unwrap_or(self.sample_rate_hz as f64 / 2.0)
    }

    pub fn log_floor_value(&self) -> f32 {
        (self.log_floor as f32).ln()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::Config(m));
        if self.sample_rate_hz == 0 || self.hop_length() == 0 || self.win_length() < 2 {
            return bad("sample rate, stride and window must be positive".into());
        }
        if self.win_length() < self.hop_length() {
            return bad("window must be at least one hop long".into());
        }
        if self.n_mels == 0 || !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax()) {
            return bad(format!(
                "bad mel range [{}, {}] with {} bins",
                self.fmin_hz,
                self.fmax(),
                self.n_mels
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log floor must be positive".into());
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters with unit peak, `n_mels x n_bins`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Array2<f32>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(config: &MelConfig) -> Self {
        let n_mels = config.n_mels;
        let (lo, hi) = (hz_to_mel(config.fmin_hz), hz_to_mel(config.fmax()));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|k| mel_to_hz(lo + (hi - lo) * k as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = config.sample_rate_hz as f64 / config.n_fft() as f64;
        let weights = Array2::from_shape_fn((n_mels, config.n_bins()), |(m, k)| {
            triangle(edges[m], edges[m + 1], edges[m + 2], k as f64 * bin_hz) as f32
        });
        Self {
            weights,
            centers_hz: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn weights(&self) -> &Array2<f32> {
        &self.weights
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }
}

fn triangle(left: f64, center: f64, right: f64, f: f64) -> f64 {
    if f <= left || f >= right {
        0.0
    } else if f <= center {
        (f - left) / (center - left)
    } else {
        (right - f) / (right - center)
    }
}

/// Short-time Fourier transform with a centred, zero-padded Hann window.
pub(crate) struct Stft {
    pub n_fft: usize,
    pub hop: usize,
    window: Vec<f32>,
    forward: Arc<dyn Fft<f32>>,
    inverse: Arc<dyn Fft<f32>>,
}

impl Stft {
    pub fn new(config: &MelConfig) -> Self {
        let n_fft = config.n_fft();
        let win = config.win_length();
        let offset = (n_fft - win) / 2;
        let mut window = vec![0.0f32; n_fft];
        for i in 0..win {
            // periodic Hann
            let w = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / win as f64).cos();
            window[offset + i] = w as f32;
        }
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop: config.hop_length(),
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        num_samples / self.hop
    }

    fn sample(signal: &[f32], idx: isize) -> f32 {
        let n = signal.len() as isize;
        let mut i = idx;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        if (0..n).contains(&i) {
            signal[i as usize]
        } else {
            0.0
        }
    }

    /// Complex spectra, one row of `n_fft / 2 + 1` bins per frame.
    pub fn forward(&self, signal: &[f32]) -> Vec<Vec<Complex32>> {
        let frames = self.num_frames(signal.len());
        let half = (self.n_fft / 2) as isize;
        let mut buf = vec![Complex32::new(0.0, 0.0); self.n_fft];
        (0..frames)
            .map(|t| {
                let start = (t * self.hop) as isize - half;
                for (k, slot) in buf.iter_mut().enumerate() {
                    let x = Self::sample(signal, start + k as isize) * self.window[k];
                    *slot = Complex32::new(x, 0.0);
                }
                self.forward.process(&mut buf);
                buf[..self.n_fft / 2 + 1].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse producing `frames * hop` samples.
    pub fn inverse(&self, spectra: &[Vec<Complex32>]) -> Vec<f32> {
        let frames = spectra.len();
        let len = frames * self.hop;
        let half = self.n_fft / 2;
        let mut out = vec![0.0f32; len + self.n_fft];
        let mut norm = vec![0.0f32; len + self.n_fft];
        let mut buf = vec![Complex32::new(0.0, 0.0); self.n_fft];
        for (t, spec) in spectra.iter().enumerate() {
            buf[..=half].copy_from_slice(spec);
            for k in 1..half {
                buf[self.n_fft - k] = spec[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for k in 0..self.n_fft {
                let w = self.window[k];
                out[start + k] += buf[k].re / self.n_fft as f32 * w;
                norm[start + k] += w * w;
            }
        }
        (0..len)
            .map(|i| {
                let n = norm[i + half];
                if n > 1e-8 {
                    out[i + half] / n
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Mel magnitudes (before the log) of precomputed spectra.
pub(crate) fn mel_magnitudes(fb: &MelFilterbank, spectra: &[Vec<Complex32>]) -> Array2<f32> {
    let weights = fb.weights();
    let mut out = Array2::<f32>::zeros((spectra.len(), weights.nrows()));
    for (t, spec) in spectra.iter().enumerate() {
        let mags: Vec<f32> = spec.iter().map(|c| c.norm()).collect();
        for (m, row) in weights.rows().into_iter().enumerate() {
            out[[t, m]] = row.iter().zip(&mags).map(|(w, a)| w * a).sum();
        }
    }
    out
}

/// 80-bin log-mel spectrogram at a 20 ms stride (with the default config).
pub fn extract_mel(w: &Waveform, config: &MelConfig) -> Result<FeatureSequence, FeatureError> {
    config.validate()?;
    if w.sample_rate_hz() != config.sample_rate_hz {
        return Err(FeatureError::SampleRateMismatch {
            expected: config.sample_rate_hz,
            actual: w.sample_rate_hz(),
        });
    }
    let win = config.win_length();
    if w.len() < win {
        return Err(FeatureError::TooShort {
            samples: w.len(),
            window: win,
        });
    }
    let stft = Stft::new(config);
    let fb = MelFilterbank::new(config);
    let spectra = stft.forward(w.samples());
    let floor = config.log_floor as f32;
    let mut mel = mel_magnitudes(&fb, &spectra);
    mel.mapv_inplace(|v| v.max(floor).ln());
    let kind = if config.n_mels == 80 {
        FeatureKind::Mel
    } else {
        FeatureKind::Other
    };
    Ok(FeatureSequence::new(mel, config.stride_ms, kind)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, sr: u32) -> Waveform {
        let n = (seconds * sr as f64) as usize;
        let samples = (0..n)
            .map(|i| (0.5 * (std::f64::consts::TAU * freq * i as f64 / sr as f64).sin()) as f32)
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn pinned_analysis_parameters() {
        let c = MelConfig::default();
        assert_eq!(c.hop_length(), 320);
        assert_eq!(c.win_length(), 800);
        assert_eq!(c.n_fft(), 1024);
        assert_eq!(c.n_bins(), 513);
        assert_eq!(c.fmax(), 8000.0);
    }

    #[test]
    fn silence_sits_on_the_log_floor() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let c = MelConfig::default();
        let m = extract_mel(&w, &c).unwrap();
        assert!(m.data().iter().all(|v| *v == c.log_floor_value()));
    }

    #[test]
    fn one_second_is_fifty_frames() {
        let m = extract_mel(&tone(300.0, 1.0, 16_000), &MelConfig::default()).unwrap();
        assert_eq!(m.num_frames(), 50);
        assert_eq!(m.dim(), 80);
        assert_eq!(m.kind(), FeatureKind::Mel);
        assert_eq!(m.stride_ms(), 20.0);
    }

    #[test]
    fn tone_peaks_in_the_filter_covering_it() {
        let c = MelConfig::default();
        // oracle: evaluate every triangle directly at 440 Hz
        let mels: Vec<f64> = (0..c.n_mels + 2)
            .map(|k| {
                let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(8000.0));
                mel_to_hz(lo + (hi - lo) * k as f64 / (c.n_mels + 1) as f64)
            })
            .collect();
        let expected = (0..c.n_mels)
            .max_by(|a, b| {
                let ta = triangle(mels[*a], mels[a + 1], mels[a + 2], 440.0);
                let tb = triangle(mels[*b], mels[b + 1], mels[b + 2], 440.0);
                ta.total_cmp(&tb)
            })
            .unwrap();
        let m = extract_mel(&tone(440.0, 1.0, 16_000), &c).unwrap();
        for t in 2..m.num_frames() - 2 {
            let row = m.row(t);
            let argmax = (0..row.len()).max_by(|a, b| row[*a].total_cmp(&row[*b])).unwrap();
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn too_short() {
        let w = Waveform::new(vec![0.1; 100], 16_000).unwrap();
        assert!(matches!(
            extract_mel(&w, &MelConfig::default()),
            Err(FeatureError::TooShort { samples: 100, window: 800 })
        ));
    }

    #[test]
    fn stft_round_trip_reconstructs_interior() {
        let c = MelConfig::default();
        let w = tone(523.0, 0.5, 16_000);
        let stft = Stft::new(&c);
        let back = stft.inverse(&stft.forward(w.samples()));
        assert_eq!(back.len(), 8000);
        for i in 1000..7000 {
            assert!((back[i] - w.samples()[i]).abs() < 1e-3, "sample {i}");
        }
    }
}
