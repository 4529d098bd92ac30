//! The audited memory store: an ordered, immutable collection of textual
//! memory entries with a line-delimited persistence format.
//!
//! Stores are values. Removal returns a new store and never touches the
//! original, so every harmful event in a batch audit is scored against the
//! same state.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Leading header line of a store file.
pub const STORE_FORMAT: &str = "memaudit-store";
/// Current store file version.
pub const STORE_VERSION: u32 = 1;

/// Opaque identifier of a memory entry, unique within a store.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemoryId(String);

impl MemoryId {
    pub fn new(id: impl Into<String>) -> Self {
        MemoryId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MemoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for MemoryId {
    fn from(s: &str) -> Self {
        MemoryId(s.to_string())
    }
}

/// Shape of the record: a question-answering demonstration or an episode
/// trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemoryKind {
    #[serde(rename = "qa-demo")]
    QaDemo,
    #[serde(rename = "trajectory")]
    Trajectory,
}

/// One stored memory entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub id: MemoryId,
    pub text: String,
    pub kind: MemoryKind,
    /// Monotone insertion sequence number; assigned by the store, not
    /// serialized (file order is authoritative).
    #[serde(skip)]
    pub created_at: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct RecordLine<'a> {
    id: &'a str,
    text: &'a str,
    kind: MemoryKind,
}

#[derive(Deserialize)]
struct OwnedRecordLine {
    id: String,
    text: String,
    kind: MemoryKind,
}

/// Ordered, immutable collection of memory entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    items: Vec<MemoryItem>,
    version: u32,
}

impl MemoryStore {
    /// Build a store from `(id, text, kind)` triples, assigning
    /// `created_at` in insertion order.
    ///
    /// Fails on duplicate ids or empty text.
    pub fn from_records(
        records: impl IntoIterator<Item = (MemoryId, String, MemoryKind)>,
    ) -> Result<Self> {
        let mut items = Vec::new();
        let mut seen = BTreeSet::new();
        for (seq, (id, text, kind)) in records.into_iter().enumerate() {
            if text.is_empty() {
                return Err(Error::Integrity(format!("memory \"{id}\" has empty text")));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::Integrity(format!("duplicate memory id \"{id}\"")));
            }
            items.push(MemoryItem {
                id,
                text,
                kind,
                created_at: seq as u64,
            });
        }
        Ok(MemoryStore {
            items,
            version: STORE_VERSION,
        })
    }

    /// Load a store from its line-delimited file: a header line followed by
    /// one record per line, in store order.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = content.lines().enumerate();

        let (_, header_line) = lines.next().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing header line".into(),
        })?;
        let header: Header = serde_json::from_str(header_line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.format != STORE_FORMAT {
            return Err(Error::Integrity(format!(
                "unexpected file format \"{}\", expected \"{STORE_FORMAT}\"",
                header.format
            )));
        }
        if header.version != STORE_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported store version {}",
                header.version
            )));
        }

        let mut records = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let rec: OwnedRecordLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            records.push((MemoryId::new(rec.id), rec.text, rec.kind));
        }
        Self::from_records(records)
    }

    /// Serialize the store in its canonical form: header line plus one
    /// record per line in store order, trailing newline.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        let header = Header {
            format: STORE_FORMAT.to_string(),
            version: self.version,
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for item in &self.items {
            let line = RecordLine {
                id: item.id.as_str(),
                text: &item.text,
                kind: item.kind,
            };
            out.push_str(&serde_json::to_string(&line).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_canonical_string()).map_err(|e| Error::io(path, e))
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    pub fn get(&self, id: &MemoryId) -> Option<&MemoryItem> {
        self.items.iter().find(|m| &m.id == id)
    }

    pub fn contains(&self, id: &MemoryId) -> bool {
        self.get(id).is_some()
    }

    pub fn ids(&self) -> impl Iterator<Item = &MemoryId> {
        self.items.iter().map(|m| &m.id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// New store containing exactly the items whose id is not in `ids`,
    /// original order and `created_at` preserved. The input store is left
    /// unchanged.
    pub fn remove(&self, ids: &BTreeSet<MemoryId>) -> MemoryStore {
        MemoryStore {
            items: self
                .items
                .iter()
                .filter(|m| !ids.contains(&m.id))
                .cloned()
                .collect(),
            version: self.version,
        }
    }

    /// Convenience: remove a single memory.
    pub fn remove_one(&self, id: &MemoryId) -> MemoryStore {
        let mut set = BTreeSet::new();
        set.insert(id.clone());
        self.remove(&set)
    }

    /// Ids in `ids` that are not present in the store. Removal tolerates
    /// these; callers surface them as warnings.
    pub fn missing(&self, ids: &BTreeSet<MemoryId>) -> Vec<MemoryId> {
        ids.iter()
            .filter(|id| !self.contains(id))
            .cloned()
            .collect()
    }
}
