//! Recognizer, frame-embedder and naturalness-predictor slots.

use super::EvalError;
use crate::data::{FeatureKind, FeatureSequence, PhoneCodebook};
use crate::features::{project_mel, BackendEntry, Waveform};

/// Speech recognizer used for hypothesis transcripts.
pub trait Asr: Send + Sync {
    fn id(&self) -> &str;

    fn transcribe(&self, mel: &FeatureSequence) -> Result<String, EvalError>;
}

/// Nearest-prototype phone recognizer over log-mel frames.
pub struct MockAsr {
    pub codebook: PhoneCodebook,
}

impl Asr for MockAsr {
    fn id(&self) -> &str {
        "mock"
    }

    fn transcribe(&self, mel: &FeatureSequence) -> Result<String, EvalError> {
        if mel.dim() != self.codebook.dim() {
            return Err(EvalError::DimMismatch {
                generated: mel.dim(),
                reference: self.codebook.dim(),
            });
        }
        Ok(self.codebook.transcribe(mel))
    }
}

pub struct ExternalAsr {
    pub backend: String,
}

impl Asr for ExternalAsr {
    fn id(&self) -> &str {
        &self.backend
    }

    fn transcribe(&self, _mel: &FeatureSequence) -> Result<String, EvalError> {
        Err(EvalError::Backend {
            backend: self.backend.clone(),
            cause: "no runtime for external recognizers is linked into this build".into(),
        })
    }
}

/// Frame features for the SpeechBERTScore comparison.
pub trait FrameEmbedder: Send + Sync {
    fn id(&self) -> &str;

    fn embed(&self, mel: &FeatureSequence) -> Result<FeatureSequence, EvalError>;
}

/// Seeded projection of log-mel frames, the stand-in for a learned speech
/// encoder.
pub struct ProjectionEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for ProjectionEmbedder {
    fn default() -> Self {
        Self { dim: 256, seed: 2 }
    }
}

impl FrameEmbedder for ProjectionEmbedder {
    fn id(&self) -> &str {
        "pseudo"
    }

    fn embed(&self, mel: &FeatureSequence) -> Result<FeatureSequence, EvalError> {
        Ok(project_mel(mel, self.dim, self.seed, FeatureKind::Other)?)
    }
}

pub trait MosPredictor: Send + Sync {
    fn id(&self) -> &str;

    fn predict(&self, w: &Waveform) -> Result<f64, EvalError>;
}

/// Deterministic score from level and zero-crossing rate, clamped to
/// `[1, 5]`. Loud, low-noise signals score high; silence and white-noise-like
/// signals score low.
pub struct MockMos;

impl MosPredictor for MockMos {
    fn id(&self) -> &str {
        "mock"
    }

    fn predict(&self, w: &Waveform) -> Result<f64, EvalError> {
        let s = w.samples();
        let rms = (s.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
        let level_db = 20.0 * (rms + 1e-9).log10();
        let crossings = s
            .windows(2)
            .filter(|p| (p[0] >= 0.0) != (p[1] >= 0.0))
            .count() as f64
            / (s.len().max(2) - 1) as f64;
        let level = (-((level_db + 20.0) / 15.0).powi(2)).exp();
        let clean = 1.0 - (crossings * 2.0).min(1.0);
        Ok((1.0 + 4.0 * level * (0.3 + 0.7 * clean)).clamp(1.0, 5.0))
    }
}

pub struct ExternalMos {
    pub backend: String,
}

impl MosPredictor for ExternalMos {
    fn id(&self) -> &str {
        &self.backend
    }

    fn predict(&self, _w: &Waveform) -> Result<f64, EvalError> {
        Err(EvalError::Backend {
            backend: self.backend.clone(),
            cause: "no runtime for external MOS predictors is linked into this build".into(),
        })
    }
}

/// `mock` or nothing maps to [`MockMos`]; anything else is external.
pub fn mos_from_entry(entry: Option<&BackendEntry>) -> Box<dyn MosPredictor> {
    match entry {
        None => Box::new(MockMos),
        Some(e) if e.backend == "mock" => Box::new(MockMos),
        Some(e) => Box::new(ExternalMos {
            backend: e.backend.clone(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_mos_is_bounded_and_deterministic() {
        let tone: Vec<f32> = (0..16_000).map(|i| 0.3 * (i as f32 * 0.05).sin()).collect();
        let noise: Vec<f32> = (0..16_000)
            .map(|i| if (i * 7919) % 13 < 6 { 0.9 } else { -0.9 })
            .collect();
        let silence = vec![0.0f32; 16_000];
        for s in [tone, noise, silence, vec![1.0; 3]] {
            let w = Waveform::new(s, 16_000).unwrap();
            let a = MockMos.predict(&w).unwrap();
            assert!((1.0..=5.0).contains(&a));
            assert_eq!(a, MockMos.predict(&w).unwrap());
        }
    }

    #[test]
    fn tone_beats_silence() {
        let tone: Vec<f32> = (0..16_000).map(|i| 0.3 * (i as f32 * 0.05).sin()).collect();
        let t = MockMos.predict(&Waveform::new(tone, 16_000).unwrap()).unwrap();
        let s = MockMos.predict(&Waveform::new(vec![0.0; 16_000], 16_000).unwrap()).unwrap();
        assert!(t > s);
    }

    #[test]
    fn external_mos_names_backend() {
        let m = mos_from_entry(Some(&BackendEntry {
            backend: "utmos22".into(),
            checkpoint: None,
            seed: None,
            layer_index: None,
        }));
        let err = m.predict(&Waveform::new(vec![0.1; 10], 16_000).unwrap()).unwrap_err();
        assert!(err.to_string().contains("utmos22"));
    }
}
