use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("tensor format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error: {message}")]
    Parse { message: String, raw: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Training { epoch: usize, loss: f64 },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for failures caused by an unreachable or misbehaving remote backend.
    pub fn is_transport(&self) -> bool {
        matches!(self, Error::Backend(_))
    }
}

/// Failure reported by a pluggable model backend (HTTP or mock).
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend request timed out: {0}")]
    Timeout(String),

    #[error("backend transport failure: {0}")]
    Transport(String),

    #[error("backend returned an invalid response: {0}")]
    InvalidResponse(String),
}

impl BackendError {
    /// Whether a retry has any chance of succeeding.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Timeout(_) | BackendError::Transport(_))
    }
}
