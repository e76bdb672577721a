use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit reports. Variants are grouped by category so the
/// CLI can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("manifest composition: {0}")]
    Composition(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("unsupported capability: {0}")]
    Unsupported(String),

    #[error("cache integrity: {0}")]
    CacheIntegrity(String),

    #[error("numerical abort at step {step} (epoch {epoch}, lr {lr:e}): {detail}; batch ids [{batch_ids}]")]
    Numerical {
        step: u64,
        epoch: usize,
        lr: f64,
        detail: String,
        batch_ids: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

/// Broad failure category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Numerical,
    Data,
    Unsupported,
    Internal,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Io { .. } | Error::Parse { .. } => ErrorKind::Io,
            Error::Numerical { .. } => ErrorKind::Numerical,
            Error::Unsupported(_) => ErrorKind::Unsupported,
            Error::Validation(_)
            | Error::Shape(_)
            | Error::Range(_)
            | Error::Argument(_)
            | Error::Degenerate(_)
            | Error::Composition(_)
            | Error::CacheIntegrity(_) => ErrorKind::Data,
            Error::Tensor(_) => ErrorKind::Internal,
        }
    }
}
