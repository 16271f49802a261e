use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: invalid `{field}`: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite {what} at epoch {epoch} ({phase} phase)")]
    Divergence {
        what: String,
        epoch: usize,
        phase: &'static str,
    },

    #[error("checkpoint {path}: version {found} is not supported (expected {expected})")]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("malformed checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("csv error")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by front-ends to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::CheckpointVersion { .. } => ErrorKind::Config,
            Error::Divergence { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
