//! Versioned checkpoint container with a content hash per parameter group.
//!
//! Layout: magic, u32 LE header length, JSON header, then every tensor's
//! f32 LE values in header order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nn::ParamStore;
use super::phase::Phase;
use super::{ModelConfig, ParamGroup, S2sError, S2sModel};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"VSCK1";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    S2s,
    PpgToSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBlob {
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupState {
    pub version: u32,
    pub fingerprint: String,
    pub tensors: BTreeMap<String, TensorBlob>,
}

/// One completed training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub steps: usize,
    pub changed_groups: Vec<ParamGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    pub config: ModelConfig,
    pub step: u64,
    pub phases: Vec<PhaseRecord>,
    pub groups: BTreeMap<ParamGroup, GroupState>,
}

fn fingerprint(tensors: &BTreeMap<String, TensorBlob>) -> String {
    let mut h = Sha256::new();
    for (name, blob) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((blob.shape.len() as u64).to_le_bytes());
        for d in &blob.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &blob.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl GroupState {
    fn new(version: u32, tensors: BTreeMap<String, TensorBlob>) -> Self {
        Self {
            version,
            fingerprint: fingerprint(&tensors),
            tensors,
        }
    }

    pub fn recompute_fingerprint(&self) -> String {
        fingerprint(&self.tensors)
    }
}

impl Checkpoint {
    /// Snapshot of a parameter store. Groups listed in `bump` get their
    /// version incremented relative to `previous`.
    pub fn from_params(
        architecture: Architecture,
        config: &ModelConfig,
        params: &ParamStore,
        step: u64,
        phases: Vec<PhaseRecord>,
        previous: Option<&Checkpoint>,
    ) -> Result<Self, S2sError> {
        let mut per_group: BTreeMap<ParamGroup, BTreeMap<String, TensorBlob>> = BTreeMap::new();
        for (name, var) in params.iter() {
            let group = ParamStore::group_of(name)
                .ok_or_else(|| S2sError::Checkpoint(format!("parameter `{name}` has no group")))?;
            let t = var.as_tensor();
            per_group.entry(group).or_default().insert(
                name.to_string(),
                TensorBlob {
                    shape: t.dims().to_vec(),
                    data: t.flatten_all()?.to_vec1::<f32>()?,
                },
            );
        }
        let groups = per_group
            .into_iter()
            .map(|(group, tensors)| {
                let fp = fingerprint(&tensors);
                let version = match previous.and_then(|p| p.groups.get(&group)) {
                    Some(old) if old.fingerprint == fp => old.version,
                    Some(old) => old.version + 1,
                    None => 1,
                };
                (group, GroupState::new(version, tensors))
            })
            .collect();
        Ok(Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            architecture,
            config: config.clone(),
            step,
            phases,
            groups,
        })
    }

    pub fn from_model(
        model: &S2sModel,
        step: u64,
        phases: Vec<PhaseRecord>,
        previous: Option<&Checkpoint>,
    ) -> Result<Self, S2sError> {
        Self::from_params(Architecture::S2s, model.config(), model.params(), step, phases, previous)
    }

    pub fn fingerprint(&self, group: ParamGroup) -> Option<&str> {
        self.groups.get(&group).map(|g| g.fingerprint.as_str())
    }

    pub fn fingerprints(&self) -> BTreeMap<ParamGroup, String> {
        self.groups
            .iter()
            .map(|(g, s)| (*g, s.fingerprint.clone()))
            .collect()
    }

    /// Recomputes every group hash and compares it with the stored one.
    pub fn verify(&self) -> Result<(), S2sError> {
        for (group, state) in &self.groups {
            let computed = state.recompute_fingerprint();
            if computed != state.fingerprint {
                return Err(S2sError::FingerprintMismatch {
                    group: *group,
                    stored: state.fingerprint.clone(),
                    computed,
                });
            }
        }
        Ok(())
    }

    pub fn last_phase(&self) -> Option<Phase> {
        self.phases.last().map(|p| p.phase)
    }

    pub fn to_params(&self) -> Result<ParamStore, S2sError> {
        let mut store = ParamStore::new();
        for state in self.groups.values() {
            for (name, blob) in &state.tensors {
                store.insert(name.clone(), blob.data.clone(), &blob.shape)?;
            }
        }
        Ok(store)
    }

    pub fn to_model(&self) -> Result<S2sModel, S2sError> {
        if self.architecture != Architecture::S2s {
            return Err(S2sError::Checkpoint(format!(
                "holds a {:?} model, not a conversion model",
                self.architecture
            )));
        }
        S2sModel::from_parts(self.config.clone(), self.to_params()?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(self).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(header.len() + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for state in self.groups.values() {
            for blob in state.tensors.values() {
                for v in &blob.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, S2sError> {
        let corrupt = |m: &str| S2sError::Checkpoint(format!("corrupt file: {m}"));
        let n = CHECKPOINT_MAGIC.len();
        if bytes.len() < n + 4 || &bytes[..n] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let len = u32::from_le_bytes(bytes[n..n + 4].try_into().expect("4 bytes")) as usize;
        let body = &bytes[n + 4..];
        if body.len() < len {
            return Err(corrupt("truncated header"));
        }
        let version: serde_json::Value =
            serde_json::from_slice(&body[..len]).map_err(|e| corrupt(&e.to_string()))?;
        let found = version
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("no format version"))? as u32;
        if found != CHECKPOINT_FORMAT_VERSION {
            return Err(S2sError::VersionMismatch {
                expected: CHECKPOINT_FORMAT_VERSION,
                found,
            });
        }
        let mut ckpt: Checkpoint =
            serde_json::from_value(version).map_err(|e| corrupt(&e.to_string()))?;
        let mut payload = body[len..].chunks_exact(4);
        for state in ckpt.groups.values_mut() {
            for blob in state.tensors.values_mut() {
                let count: usize = blob.shape.iter().product();
                blob.data = payload
                    .by_ref()
                    .take(count)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                if blob.data.len() != count {
                    return Err(corrupt("truncated payload"));
                }
            }
        }
        if payload.next().is_some() || !payload.remainder().is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        ckpt.verify()?;
        Ok(ckpt)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> S2sError + '_ {
    move |source| S2sError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Atomic write: a sibling temp file renamed into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), S2sError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.set_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&ckpt.encode()).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, S2sError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Checkpoint::decode(&bytes)
}
