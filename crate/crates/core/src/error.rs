use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("single-class labels: {0}")]
    SingleClass(String),
    #[error("class {class} has {got} records, at least {needed} required")]
    ClassTooSmall {
        class: &'static str,
        got: usize,
        needed: usize,
    },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: {left} labels vs {right} predictions")]
    LengthMismatch { left: usize, right: usize },
    #[error("{what} format version {found:?} is not supported (expected {expected:?})")]
    Version {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("model was trained against featurizer {expected}, got {found}")]
    FeaturizerHash { expected: String, found: String },
    #[error("suite {0:?} has no category mapping")]
    UnmappedSuite(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no strategies requested")]
    NoStrategies,
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::NoStrategies | Error::InvalidParam(_) => ErrorKind::Usage,
            Error::Serialize(_) => ErrorKind::Internal,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn read(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Read {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Write {
            path: path.into(),
            source,
        }
    }
}
