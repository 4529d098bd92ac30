//! Error types shared across the auditing toolkit.

use std::path::PathBuf;

/// Unified error type for store, retrieval, replay, scoring and pipeline
/// operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A line of an input file could not be parsed.
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A structural invariant of the data was violated (duplicate ids,
    /// references to unknown memories, empty text, bad headers).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A configuration value is outside its documented range.
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated an operation precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// A ratio or metric is undefined on empty input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Fewer than two score values, so no distribution statistics exist.
    #[error("no distribution: {0}")]
    NoDistribution(String),

    /// The query does not belong to the simulated world.
    #[error("unknown question: {0}")]
    UnknownQuestion(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
