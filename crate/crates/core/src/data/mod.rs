//! Corpus records, feature containers and the synthetic triplet generator.

mod container;
mod manifest;
mod synthetic;

use std::fmt;
use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use container::{
    decode_container, encode_container, read_feature_container, write_feature_container,
    CONTAINER_MAGIC,
};
pub use manifest::{load_manifest, write_manifest, Manifest, TripletRecord, MANIFEST_VERSION};
pub use synthetic::{
    audio_rel_path, feature_path, generate_synthetic_triplets, load_truth, write_synthetic_corpus, PhoneCodebook, Segment, SyntheticConfig,
    SyntheticCorpus, SyntheticTriplet, TruthRecord,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty manifest")]
    EmptyManifest,
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),
    #[error("utterance `{id}` is missing role {role}")]
    MissingRole { id: String, role: Role },
    #[error("corrupt feature container header: {0}")]
    CorruptHeader(String),
    #[error("feature payload size mismatch: header declares {expected} bytes, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("invalid feature sequence: {0}")]
    InvalidFeature(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// One of the three recordings that make up a shadowing triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    /// The learner's read-aloud utterance.
    #[serde(rename = "L2_R")]
    L2R,
    /// The native rater's first, unscripted shadowing.
    #[serde(rename = "L1_S1")]
    L1S1,
    /// The native rater's script-shadowing.
    #[serde(rename = "L1_SS")]
    L1SS,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::L2R, Role::L1S1, Role::L1SS];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::L2R => "L2_R",
            Role::L1S1 => "L1_S1",
            Role::L1SS => "L1_SS",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "L2_R" => Ok(Role::L2R),
            "L1_S1" => Ok(Role::L1S1),
            "L1_SS" => Ok(Role::L1SS),
            other => Err(format!("unknown role `{other}` (expected L2_R, L1_S1 or L1_SS)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// What a feature matrix represents. Each kind except `Other` has a fixed
/// per-frame dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Mel,
    PpgBnf,
    S3r,
    Other,
}

impl FeatureKind {
    pub fn default_dim(self) -> Option<usize> {
        match self {
            FeatureKind::Mel => Some(80),
            FeatureKind::PpgBnf => Some(144),
            FeatureKind::S3r => Some(768),
            FeatureKind::Other => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Mel => "mel",
            FeatureKind::PpgBnf => "ppg_bnf",
            FeatureKind::S3r => "s3r",
            FeatureKind::Other => "other",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mel" => Ok(FeatureKind::Mel),
            "ppg_bnf" => Ok(FeatureKind::PpgBnf),
            "s3r" => Ok(FeatureKind::S3r),
            "other" => Ok(FeatureKind::Other),
            other => Err(format!("unknown feature kind `{other}`")),
        }
    }
}

/// A framewise feature matrix (frames x dim) with its frame stride.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Array2<f32>,
    stride_ms: f64,
    kind: FeatureKind,
}

impl FeatureSequence {
    pub fn new(data: Array2<f32>, stride_ms: f64, kind: FeatureKind) -> Result<Self, DataError> {
        if data.nrows() == 0 {
            return Err(DataError::InvalidFeature("sequence has no frames".into()));
        }
        if data.ncols() == 0 {
            return Err(DataError::InvalidFeature("feature dimension is zero".into()));
        }
        if !(stride_ms.is_finite() && stride_ms > 0.0) {
            return Err(DataError::InvalidFeature(format!(
                "stride must be positive, got {stride_ms}"
            )));
        }
        if let Some(dim) = kind.default_dim() {
            if data.ncols() != dim {
                return Err(DataError::InvalidFeature(format!(
                    "{kind} features must have dim {dim}, got {}",
                    data.ncols()
                )));
            }
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DataError::InvalidFeature(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Self {
            data,
            stride_ms,
            kind,
        })
    }

    pub fn from_rows(
        rows: &[Vec<f32>],
        stride_ms: f64,
        kind: FeatureKind,
    ) -> Result<Self, DataError> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(DataError::InvalidFeature("ragged rows".into()));
        }
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| DataError::InvalidFeature(e.to_string()))?;
        Self::new(data, stride_ms, kind)
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn stride_ms(&self) -> f64 {
        self.stride_ms
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let row = self.data.row(i);
        // rows of a standard-layout Array2 are contiguous
        row.to_slice().expect("standard layout")
    }

    /// Returns a copy of the data in row-major order.
    pub fn to_row_major(&self) -> Vec<f32> {
        self.data.iter().copied().collect()
    }
}
