use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Role, Split};

pub const MANIFEST_VERSION: u32 = 1;

/// One {L2_R, L1_S1, L1_SS} sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    pub utterance_id: String,
    pub role_paths: BTreeMap<Role, PathBuf>,
    pub script: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcripts: Option<BTreeMap<Role, String>>,
    pub split: Split,
    /// Corpus sample rate, when known. Not assumed anywhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate_hz: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<u16>,
}

impl TripletRecord {
    pub fn path(&self, role: Role) -> &Path {
        &self.role_paths[&role]
    }

    pub fn transcript(&self, role: Role) -> Option<&str> {
        self.transcripts
            .as_ref()
            .and_then(|t| t.get(&role))
            .map(String::as_str)
    }

    fn validate(&self) -> Result<(), DataError> {
        for role in Role::ALL {
            if !self.role_paths.contains_key(&role) {
                return Err(DataError::MissingRole {
                    id: self.utterance_id.clone(),
                    role,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    manifest_version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub records: Vec<TripletRecord>,
}

impl Manifest {
    pub fn new(records: Vec<TripletRecord>) -> Result<Self, DataError> {
        let manifest = Self {
            version: MANIFEST_VERSION,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.records.is_empty() {
            return Err(DataError::EmptyManifest);
        }
        let mut seen = HashSet::new();
        for record in &self.records {
            record.validate()?;
            if !seen.insert(record.utterance_id.as_str()) {
                return Err(DataError::DuplicateId(record.utterance_id.clone()));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&TripletRecord> {
        self.records.iter().find(|r| r.utterance_id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TripletRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Reads a JSON-lines manifest. An optional first line `{"manifest_version": N}`
/// carries the format version; every other non-blank line is one record.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_manifest(&text)
}

pub(crate) fn parse_manifest(text: &str) -> Result<Manifest, DataError> {
    let mut version = MANIFEST_VERSION;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if records.is_empty() && trimmed.contains("\"manifest_version\"") {
            let header: ManifestHeader =
                serde_json::from_str(trimmed).map_err(|e| DataError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            if header.manifest_version != MANIFEST_VERSION {
                return Err(DataError::Parse {
                    line: line_no,
                    message: format!(
                        "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                        header.manifest_version
                    ),
                });
            }
            version = header.manifest_version;
            continue;
        }
        let record: TripletRecord = serde_json::from_str(trimmed).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate()?;
        if !seen.insert(record.utterance_id.clone()) {
            return Err(DataError::DuplicateId(record.utterance_id));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(DataError::EmptyManifest);
    }
    Ok(Manifest { version, records })
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<(), DataError> {
    manifest.validate()?;
    let path = path.as_ref();
    let mut out = Vec::new();
    let header = ManifestHeader {
        manifest_version: manifest.version,
    };
    serde_json::to_writer(&mut out, &header).expect("header serializes");
    out.push(b'\n');
    for record in &manifest.records {
        serde_json::to_writer(&mut out, record).expect("record serializes");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    file.write_all(&out).map_err(|e| DataError::io(path, e))
}
