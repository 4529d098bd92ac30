//! Evaluation-only ground truth.
//!
//! The sidecar maps memory ids to benign/poisoned labels. It lives in its
//! own file and its own module so that no auditing operation (influence
//! scoring, graph scoring, fusion, selection) can observe it: nothing else
//! in this crate imports these types except the pipeline's report
//! assembly, which records the contamination ratio after auditing is done.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{MemoryId, MemoryStore};

/// Leading header line of a sidecar file.
pub const SIDECAR_FORMAT: &str = "memaudit-sidecar";
/// Current sidecar file version.
pub const SIDECAR_VERSION: u32 = 1;

/// Ground-truth provenance of a memory entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Benign,
    Poisoned,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct LabelsLine {
    labels: BTreeMap<MemoryId, Provenance>,
}

/// Evaluation-only label map, stored separately from the memory store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthSidecar {
    labels: BTreeMap<MemoryId, Provenance>,
}

impl GroundTruthSidecar {
    pub fn new(labels: BTreeMap<MemoryId, Provenance>) -> Self {
        GroundTruthSidecar { labels }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = content.lines();
        let header_line = lines.next().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing header line".into(),
        })?;
        let header: Header = serde_json::from_str(header_line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.format != SIDECAR_FORMAT || header.version != SIDECAR_VERSION {
            return Err(Error::Integrity(format!(
                "unexpected sidecar header {}/{}",
                header.format, header.version
            )));
        }
        let body = lines.next().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 2,
            message: "missing labels line".into(),
        })?;
        let parsed: LabelsLine = serde_json::from_str(body).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 2,
            message: e.to_string(),
        })?;
        Ok(GroundTruthSidecar {
            labels: parsed.labels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            format: SIDECAR_FORMAT.to_string(),
            version: SIDECAR_VERSION,
        };
        let body = LabelsLine {
            labels: self.labels.clone(),
        };
        let content = format!(
            "{}\n{}\n",
            serde_json::to_string(&header)?,
            serde_json::to_string(&body)?
        );
        fs::write(path, content).map_err(|e| Error::io(path, e))
    }

    /// Check that the sidecar covers exactly the ids of `store`.
    pub fn verify_covers(&self, store: &MemoryStore) -> Result<()> {
        for id in store.ids() {
            if !self.labels.contains_key(id) {
                return Err(Error::Integrity(format!(
                    "sidecar missing label for \"{id}\""
                )));
            }
        }
        for id in self.labels.keys() {
            if !store.contains(id) {
                return Err(Error::Integrity(format!(
                    "sidecar labels unknown memory \"{id}\""
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self, id: &MemoryId) -> Option<Provenance> {
        self.labels.get(id).copied()
    }

    pub fn is_poisoned(&self, id: &MemoryId) -> bool {
        self.label(id) == Some(Provenance::Poisoned)
    }

    pub fn poisoned_ids(&self) -> impl Iterator<Item = &MemoryId> {
        self.labels
            .iter()
            .filter(|(_, p)| **p == Provenance::Poisoned)
            .map(|(id, _)| id)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Poisoned fraction of the labeled store:
    /// `poisoned / (benign + poisoned)`. Errors on an empty sidecar.
    pub fn contamination_ratio(&self) -> Result<f64> {
        if self.labels.is_empty() {
            return Err(Error::UndefinedMetric(
                "contamination ratio of an empty sidecar".into(),
            ));
        }
        let poisoned = self.poisoned_ids().count();
        Ok(poisoned as f64 / self.labels.len() as f64)
    }
}
