//! Seeded stand-in for a shadowing corpus.
//!
//! Everything lives in a log-mel-like latent space: each "phone" is a smooth
//! spectral prototype, an utterance is a run of piecewise-constant phone
//! segments plus noise. From one script-shadowing sequence (SS) we derive
//!
//! * S1: SS with a fraction of its segments replaced by the breakdown
//!   pattern (a constant low-energy vector plus noise);
//! * L2: SS under a smooth monotonic time warp, a per-utterance channel
//!   (gain and spectral tilt), extra noise, and an accent shift on exactly
//!   the segments the shadower broke down on.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    manifest::write_manifest, write_feature_container, DataError, FeatureKind, FeatureSequence,
    Manifest, Role, Split, TripletRecord,
};

const CONSONANTS: [&str; 8] = ["k", "s", "t", "n", "m", "r", "g", "b"];
const VOWELS: [&str; 5] = ["a", "i", "u", "e", "o"];

/// Log-energy level of the breakdown pattern.
const BREAKDOWN_LEVEL: f32 = -9.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub corruption_rate: f64,
    pub seed: u64,
    pub num_phones: usize,
    pub dim: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_segment_frames: usize,
    pub max_segment_frames: usize,
    pub noise_std: f32,
    pub stride_ms: f64,
    /// L2 length as a fraction of SS length. Values above 1 make the L2
    /// source longer than its targets, which training then has to pad.
    pub min_stretch: f64,
    pub max_stretch: f64,
    /// Peak deviation of the warp from a straight line, in SS frames.
    pub warp_wobble_frames: f64,
    /// Strength of the accent shift toward a confusable phone.
    pub accent_strength: f32,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 50,
            corruption_rate: 0.3,
            seed: 7,
            num_phones: 12,
            dim: 80,
            min_segments: 6,
            max_segments: 10,
            min_segment_frames: 3,
            max_segment_frames: 7,
            noise_std: 0.15,
            stride_ms: 20.0,
            min_stretch: 0.75,
            max_stretch: 1.0,
            warp_wobble_frames: 2.0,
            accent_strength: 0.6,
            dev_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidFeature(format!("synthetic config: {m}")));
        if self.n == 0 {
            return bad("n must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return bad("corruption_rate must lie in [0, 1]");
        }
        if self.num_phones < 2 || self.num_phones > CONSONANTS.len() * VOWELS.len() {
            return bad("num_phones must lie in [2, 40]");
        }
        if self.dim == 0 || self.min_segments == 0 || self.min_segments > self.max_segments {
            return bad("bad segment count range");
        }
        if self.min_segment_frames == 0 || self.min_segment_frames > self.max_segment_frames {
            return bad("bad segment length range");
        }
        if !(self.min_stretch > 0.0 && self.min_stretch <= self.max_stretch) {
            return bad("bad stretch range");
        }
        Ok(())
    }
}

/// Phone prototypes plus the breakdown vector. Also acts as the mock
/// recognizer for synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct PhoneCodebook {
    prototypes: Array2<f32>,
    breakdown: Array1<f32>,
    tokens: Vec<String>,
    min_run: usize,
}

impl PhoneCodebook {
    pub fn generate(num_phones: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de_b00c);
        let mut prototypes = Array2::<f32>::zeros((num_phones, dim));
        for mut row in prototypes.rows_mut() {
            let tilt: f32 = rng.gen_range(-1.0..1.0);
            let bumps: Vec<(f32, f32, f32)> = (0..3)
                .map(|_| {
                    (
                        rng.gen_range(0.0..dim as f32),
                        rng.gen_range(3.0..8.0),
                        rng.gen_range(2.0..4.0),
                    )
                })
                .collect();
            for (b, v) in row.iter_mut().enumerate() {
                let x = b as f32;
                let mut value = -5.0 + tilt * (x / dim as f32 - 0.5);
                for &(center, width, amp) in &bumps {
                    let z = (x - center) / width;
                    value += amp * (-0.5 * z * z).exp();
                }
                *v = value;
            }
        }
        let tokens = (0..num_phones)
            .map(|i| format!("{}{}", CONSONANTS[i / VOWELS.len()], VOWELS[i % VOWELS.len()]))
            .collect();
        Self {
            prototypes,
            breakdown: Array1::from_elem(dim, BREAKDOWN_LEVEL),
            tokens,
            min_run: 2,
        }
    }

    pub fn num_phones(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn prototype(&self, phone: usize) -> ndarray::ArrayView1<'_, f32> {
        self.prototypes.row(phone)
    }

    pub fn breakdown(&self) -> ndarray::ArrayView1<'_, f32> {
        self.breakdown.view()
    }

    pub fn token(&self, phone: usize) -> &str {
        &self.tokens[phone]
    }

    /// Nearest-prototype label per frame; `None` marks the breakdown pattern.
    pub fn classify_frames(&self, mel: &FeatureSequence) -> Vec<Option<usize>> {
        assert_eq!(mel.dim(), self.dim(), "codebook dim mismatch");
        (0..mel.num_frames())
            .map(|t| {
                let frame = mel.row(t);
                let sq = |proto: ndarray::ArrayView1<'_, f32>| -> f32 {
                    frame.iter().zip(proto).map(|(a, b)| (a - b) * (a - b)).sum()
                };
                let mut best = (sq(self.breakdown.view()), None);
                for p in 0..self.num_phones() {
                    let d = sq(self.prototypes.row(p));
                    if d < best.0 {
                        best = (d, Some(p));
                    }
                }
                best.1
            })
            .collect()
    }

    /// Frame labels -> runs -> drop runs shorter than `min_run` -> merge
    /// equal neighbours -> drop breakdown runs.
    pub fn decode(&self, mel: &FeatureSequence) -> Vec<String> {
        let labels = self.classify_frames(mel);
        let mut runs: Vec<(Option<usize>, usize)> = Vec::new();
        for label in labels {
            match runs.last_mut() {
                Some((l, n)) if *l == label => *n += 1,
                _ => runs.push((label, 1)),
            }
        }
        let mut merged: Vec<Option<usize>> = Vec::new();
        for (label, len) in runs {
            if len < self.min_run {
                continue;
            }
            if merged.last() != Some(&label) {
                merged.push(label);
            }
        }
        merged
            .into_iter()
            .flatten()
            .map(|p| self.tokens[p].clone())
            .collect()
    }

    pub fn transcribe(&self, mel: &FeatureSequence) -> String {
        self.decode(mel).join(" ")
    }

    /// Rows 0..num_phones are prototypes; the last row is the breakdown vector.
    pub fn to_feature_sequence(&self) -> FeatureSequence {
        let mut data = Array2::zeros((self.num_phones() + 1, self.dim()));
        data.slice_mut(ndarray::s![..self.num_phones(), ..])
            .assign(&self.prototypes);
        data.row_mut(self.num_phones()).assign(&self.breakdown);
        FeatureSequence::new(data, 20.0, FeatureKind::Other).expect("finite codebook")
    }

    pub fn from_feature_sequence(seq: &FeatureSequence) -> Result<Self, DataError> {
        let rows = seq.num_frames();
        if rows < 3 {
            return Err(DataError::InvalidFeature(
                "codebook needs at least two phones and a breakdown row".into(),
            ));
        }
        let num_phones = rows - 1;
        if num_phones > CONSONANTS.len() * VOWELS.len() {
            return Err(DataError::InvalidFeature("too many phones in codebook".into()));
        }
        let prototypes = seq
            .data()
            .slice(ndarray::s![..num_phones, ..])
            .to_owned();
        let breakdown = seq.data().row(num_phones).to_owned();
        let tokens = (0..num_phones)
            .map(|i| format!("{}{}", CONSONANTS[i / VOWELS.len()], VOWELS[i % VOWELS.len()]))
            .collect();
        Ok(Self {
            prototypes,
            breakdown,
            tokens,
            min_run: 2,
        })
    }
}

/// A phone segment on the SS / S1 time axis, `start..end` in frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub phone: usize,
    pub token: String,
    pub start: usize,
    pub end: usize,
    pub corrupted: bool,
}

/// Ground truth kept beside the manifest for metric-recovery checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub utterance_id: String,
    pub segments: Vec<Segment>,
    /// For every L2 frame, the SS frame it was warped from.
    pub l2_to_ss: Vec<usize>,
}

impl TruthRecord {
    /// Per-frame corruption mask on the S1 / SS axis.
    pub fn corrupted_frames(&self) -> Vec<bool> {
        let len = self.segments.last().map_or(0, |s| s.end);
        let mut mask = vec![false; len];
        for seg in self.segments.iter().filter(|s| s.corrupted) {
            mask[seg.start..seg.end].iter_mut().for_each(|m| *m = true);
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTriplet {
    pub record: TripletRecord,
    pub truth: TruthRecord,
    pub l2: FeatureSequence,
    pub s1: FeatureSequence,
    pub ss: FeatureSequence,
}

impl SyntheticTriplet {
    pub fn features(&self, role: Role) -> &FeatureSequence {
        match role {
            Role::L2R => &self.l2,
            Role::L1S1 => &self.s1,
            Role::L1SS => &self.ss,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub codebook: PhoneCodebook,
    pub manifest: Manifest,
    pub triplets: Vec<SyntheticTriplet>,
}

pub fn audio_rel_path(id: &str, role: Role) -> PathBuf {
    PathBuf::from("audio").join(id).join(format!("{role}.wav"))
}

/// Generates `config.n` triplets. A pure function of the config.
pub fn generate_synthetic_triplets(config: &SyntheticConfig) -> Result<SyntheticCorpus, DataError> {
    config.validate()?;
    let codebook = PhoneCodebook::generate(config.num_phones, config.dim, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0f32, config.noise_std.max(0.0)).expect("valid std");

    let n_test = (config.n as f64 * config.test_fraction).floor() as usize;
    let n_dev = (config.n as f64 * config.dev_fraction).floor() as usize;
    let n_train = config.n.saturating_sub(n_test + n_dev);

    let mut triplets = Vec::with_capacity(config.n);
    for idx in 0..config.n {
        let id = format!("syn{idx:04}");
        let split = if idx < n_train {
            Split::Train
        } else if idx < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };

        // segment layout on the SS axis
        let num_segments = rng.gen_range(config.min_segments..=config.max_segments);
        let mut segments = Vec::with_capacity(num_segments);
        let mut cursor = 0;
        let mut prev_phone = usize::MAX;
        for _ in 0..num_segments {
            let mut phone = rng.gen_range(0..config.num_phones);
            while phone == prev_phone {
                phone = rng.gen_range(0..config.num_phones);
            }
            prev_phone = phone;
            let len = rng.gen_range(config.min_segment_frames..=config.max_segment_frames);
            segments.push(Segment {
                phone,
                token: codebook.token(phone).to_string(),
                start: cursor,
                end: cursor + len,
                corrupted: false,
            });
            cursor += len;
        }
        let total = cursor;
        let num_corrupt = (config.corruption_rate * num_segments as f64).round() as usize;
        let mut order: Vec<usize> = (0..num_segments).collect();
        order.shuffle(&mut rng);
        for &s in order.iter().take(num_corrupt) {
            segments[s].corrupted = true;
        }

        let mut ss = Array2::<f32>::zeros((total, config.dim));
        for seg in &segments {
            for t in seg.start..seg.end {
                for (v, p) in ss.row_mut(t).iter_mut().zip(codebook.prototype(seg.phone)) {
                    *v = p + noise.sample(&mut rng);
                }
            }
        }

        // a separate rendition of the same script, breakdowns included
        let mut s1 = Array2::<f32>::zeros((total, config.dim));
        for seg in &segments {
            let centre = if seg.corrupted {
                codebook.breakdown()
            } else {
                codebook.prototype(seg.phone)
            };
            for t in seg.start..seg.end {
                for (v, p) in s1.row_mut(t).iter_mut().zip(centre) {
                    *v = p + noise.sample(&mut rng);
                }
            }
        }

        // smooth monotonic warp: L2 frame t reads SS frame l2_to_ss[t]
        let stretch = rng.gen_range(config.min_stretch..=config.max_stretch);
        let l2_len = ((total as f64) * stretch).round().max(1.0) as usize;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = config.warp_wobble_frames * rng.gen_range(0.5..=1.0);
        let mut l2_to_ss = Vec::with_capacity(l2_len);
        let mut last = 0usize;
        for t in 0..l2_len {
            let base = if l2_len > 1 {
                t as f64 * (total - 1) as f64 / (l2_len - 1) as f64
            } else {
                0.0
            };
            let envelope = (std::f64::consts::PI * t as f64 / l2_len as f64).sin();
            let wobble = amp
                * envelope
                * (std::f64::consts::TAU * t as f64 / l2_len as f64 + phase).sin();
            let pos = (base + wobble).round().clamp(0.0, (total - 1) as f64) as usize;
            last = last.max(pos);
            l2_to_ss.push(last);
        }
        if let Some(end) = l2_to_ss.last_mut() {
            *end = total - 1;
        }

        let mut seg_of_frame = vec![0usize; total];
        for (k, seg) in segments.iter().enumerate() {
            seg_of_frame[seg.start..seg.end].iter_mut().for_each(|s| *s = k);
        }
        let accent_target: Vec<usize> = segments
            .iter()
            .map(|seg| {
                let mut other = rng.gen_range(0..config.num_phones);
                while other == seg.phone {
                    other = rng.gen_range(0..config.num_phones);
                }
                other
            })
            .collect();
        let gain: f32 = rng.gen_range(-0.5..0.5);
        let tilt: f32 = rng.gen_range(-0.5..0.5);
        let mut l2 = Array2::<f32>::zeros((l2_len, config.dim));
        for (t, &src) in l2_to_ss.iter().enumerate() {
            let k = seg_of_frame[src];
            let seg = &segments[k];
            let accent = config.accent_strength * seg.corrupted as u8 as f32;
            let own = codebook.prototype(seg.phone);
            let other = codebook.prototype(accent_target[k]);
            for (b, v) in l2.row_mut(t).iter_mut().enumerate() {
                let channel = gain + tilt * (b as f32 / config.dim as f32 - 0.5);
                *v = ss[[src, b]]
                    + accent * (other[b] - own[b])
                    + channel
                    + noise.sample(&mut rng);
            }
        }

        let kind = if config.dim == 80 {
            FeatureKind::Mel
        } else {
            FeatureKind::Other
        };
        let ss = FeatureSequence::new(ss, config.stride_ms, kind)?;
        let s1 = FeatureSequence::new(s1, config.stride_ms, kind)?;
        let l2 = FeatureSequence::new(l2, config.stride_ms, kind)?;

        let transcripts: BTreeMap<Role, String> = [
            (Role::L2R, codebook.transcribe(&l2)),
            (Role::L1S1, codebook.transcribe(&s1)),
            (Role::L1SS, codebook.transcribe(&ss)),
        ]
        .into_iter()
        .collect();
        let script = segments
            .iter()
            .map(|s| s.token.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let record = TripletRecord {
            utterance_id: id.clone(),
            role_paths: Role::ALL
                .iter()
                .map(|r| (*r, audio_rel_path(&id, *r)))
                .collect(),
            script,
            transcripts: Some(transcripts),
            split,
            sample_rate_hz: None,
            channels: None,
        };
        triplets.push(SyntheticTriplet {
            record,
            truth: TruthRecord {
                utterance_id: id,
                segments,
                l2_to_ss,
            },
            l2,
            s1,
            ss,
        });
    }

    let manifest = Manifest::new(triplets.iter().map(|t| t.record.clone()).collect())?;
    Ok(SyntheticCorpus {
        config: config.clone(),
        codebook,
        manifest,
        triplets,
    })
}

/// Conventional location of a feature container inside a feature directory.
pub fn feature_path(feature_dir: &Path, id: &str, role: Role, kind: FeatureKind) -> PathBuf {
    feature_dir.join(id).join(format!("{role}.{kind}.vshd"))
}

/// Writes `manifest.jsonl`, `truth.jsonl` and `codebook.vshd` under `dir`
/// and the latent feature containers under `feature_dir`. Returns the
/// written paths.
pub fn write_synthetic_corpus(
    corpus: &SyntheticCorpus,
    dir: impl AsRef<Path>,
    feature_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, DataError> {
    let dir = dir.as_ref();
    let feature_dir = feature_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut written = Vec::new();

    let manifest_path = dir.join("manifest.jsonl");
    write_manifest(&corpus.manifest, &manifest_path)?;
    written.push(manifest_path);

    let truth_path = dir.join("truth.jsonl");
    let mut truth = Vec::new();
    for t in &corpus.triplets {
        serde_json::to_writer(&mut truth, &t.truth).expect("truth serializes");
        truth.push(b'\n');
    }
    fs::File::create(&truth_path)
        .and_then(|mut f| f.write_all(&truth))
        .map_err(|e| DataError::io(&truth_path, e))?;
    written.push(truth_path);

    let codebook_path = dir.join("codebook.vshd");
    write_feature_container(&corpus.codebook.to_feature_sequence(), &codebook_path)?;
    written.push(codebook_path);

    for t in &corpus.triplets {
        for role in Role::ALL {
            let seq = t.features(role);
            let path = feature_path(&feature_dir, &t.record.utterance_id, role, seq.kind());
            write_feature_container(seq, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<Vec<TruthRecord>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DataError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
