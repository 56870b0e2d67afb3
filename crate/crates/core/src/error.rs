use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("{path}: row {row}: expected 2 columns, found {found}")]
    ManifestRow {
        path: PathBuf,
        row: usize,
        found: usize,
    },

    #[error("species task supports at most 7 labels, found {0}")]
    TooManyLabels(usize),

    #[error("non-canonical character {ch:?} at position {position}")]
    NonCanonical { position: usize, ch: char },

    #[error("token id {0} outside vocabulary")]
    TokenOutOfRange(u32),

    #[error("cannot split without leakage; lower thresholds")]
    SingleCluster,

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient examples for class `{class}`: need {needed}, have {available}")]
    InsufficientPool {
        class: String,
        needed: usize,
        available: usize,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    DataConstraint,
    Runtime,
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::SingleCluster | Error::InsufficientPool { .. } | Error::TooManyLabels(_) => {
                ErrorKind::DataConstraint
            }
            Error::Shape(_) | Error::UndefinedMetric(_) => ErrorKind::Runtime,
            _ => ErrorKind::Input,
        }
    }
}
