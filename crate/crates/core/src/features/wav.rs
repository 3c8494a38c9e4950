use std::path::Path;

use super::FeatureError;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self, FeatureError> {
        if samples.is_empty() {
            return Err(FeatureError::InvalidWaveform("no samples".into()));
        }
        if sample_rate_hz == 0 {
            return Err(FeatureError::InvalidWaveform("sample rate is zero".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(FeatureError::InvalidWaveform(format!(
                "sample {i} is {} (must be finite and within [-1, 1])",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Like [`Waveform::new`] but scales the signal down if its peak exceeds 1.
    pub fn normalized(mut samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self, FeatureError> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(FeatureError::InvalidWaveform("non-finite sample".into()));
        }
        let peak = samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        if peak > 1.0 {
            samples.iter_mut().for_each(|s| *s /= peak);
        }
        Self::new(samples, sample_rate_hz)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate_hz as f64
    }
}

/// Reads a wave file, mixing multichannel audio down to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, FeatureError> {
    let path = path.as_ref();
    let wav_err = |e: hound::Error| FeatureError::Wav {
        path: path.to_path_buf(),
        source: e,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let mono = interleaved
        .chunks(channels)
        .map(|c| (c.iter().sum::<f32>() / channels as f32).clamp(-1.0, 1.0))
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

/// Writes 16-bit PCM mono.
pub fn write_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    let path = path.as_ref();
    let wav_err = |e: hound::Error| FeatureError::Wav {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| wav_err(hound::Error::IoError(e)))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for s in w.samples() {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}
