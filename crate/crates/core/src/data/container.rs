//! Binary feature container: `VSHD1`, a u32 LE header length, a JSON header
//! carrying shape, stride and kind, then the row-major f32 LE payload.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DataError, FeatureKind, FeatureSequence};

pub const CONTAINER_MAGIC: &[u8; 5] = b"VSHD1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    frames: usize,
    dim: usize,
    stride_ms: f64,
    kind: FeatureKind,
}

pub fn encode_container(seq: &FeatureSequence) -> Vec<u8> {
    let header = Header {
        frames: seq.num_frames(),
        dim: seq.dim(),
        stride_ms: seq.stride_ms(),
        kind: seq.kind(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(9 + header.len() + 4 * seq.data().len());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in seq.data().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_container(bytes: &[u8]) -> Result<FeatureSequence, DataError> {
    if bytes.len() < 9 || &bytes[..5] != CONTAINER_MAGIC {
        return Err(DataError::CorruptHeader("bad magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let header_end = 9usize
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| DataError::CorruptHeader("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&bytes[9..header_end])
        .map_err(|e| DataError::CorruptHeader(e.to_string()))?;
    let payload = &bytes[header_end..];
    let expected = header
        .frames
        .checked_mul(header.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| DataError::CorruptHeader("shape overflows".into()))?;
    if payload.len() != expected {
        return Err(DataError::SizeMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array2::from_shape_vec((header.frames, header.dim), values)
        .map_err(|e| DataError::CorruptHeader(e.to_string()))?;
    FeatureSequence::new(data, header.stride_ms, header.kind)
}

/// Writes through a sibling temp file renamed into place.
pub fn write_feature_container(
    seq: &FeatureSequence,
    path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, encode_container(seq)).map_err(|e| DataError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))
}

pub fn read_feature_container(path: impl AsRef<Path>) -> Result<FeatureSequence, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_container(&bytes)
}
