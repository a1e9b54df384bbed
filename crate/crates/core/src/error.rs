use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("alignment spans overlap or are out of order: {first:?} and {second:?}")]
    Overlap { first: String, second: String },

    #[error("invalid time span for word {word:?}: {message}")]
    InvalidSpan { word: String, message: String },

    #[error("word {word:?} [{start_s}s, {end_s}s) maps to no frame within {frames} frames")]
    DegenerateSpan { word: String, start_s: f64, end_s: f64, frames: usize },

    #[error("frame span {start}..{end} is empty or outside 0..{frames}")]
    EmptySpan { start: usize, end: usize, frames: usize },

    #[error("{what}: expected {expected}, found {found}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0}: nothing to normalize over (zero non-padded positions)")]
    EmptyBatch(&'static str),

    #[error("text token {token} is not mapped to an annotated word")]
    UnmappedToken { token: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm:.6e})")]
    NonFinite { epoch: usize, batch: usize, param_norm: f64 },

    #[error("emotion similarity undefined: mean vector of {0} trajectory is zero")]
    ZeroMean(&'static str),

    #[error("utterance ids missing from {side}: {ids:?}")]
    MissingIds { side: &'static str, ids: Vec<String> },

    #[error("incompatible checkpoint: schema version {found}, supported {supported}")]
    Incompatible { found: u32, supported: u32 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}
