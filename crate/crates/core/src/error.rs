use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("instance {0} has an empty mask")]
    EmptyMask(u32),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("unknown class `{class}`; valid classes: {}", valid.join(", "))]
    UnknownClass { class: String, valid: Vec<String> },

    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error("encoder transport error after {attempts} attempt(s): {message}")]
    Transport {
        message: String,
        attempts: u32,
        retryable: bool,
        retry_after: Option<Duration>,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("corrupt {what} in {path}: {message}")]
    Corruption {
        path: PathBuf,
        what: String,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the query itself rather than the system.
    pub fn is_query_error(&self) -> bool {
        matches!(
            self,
            Error::UnknownClass { .. } | Error::InvalidInput(_) | Error::Capability(_)
        )
    }
}
