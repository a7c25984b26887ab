use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library. Variants map onto the failure classes the
/// CLI distinguishes (configuration vs runtime).
#[derive(Debug, Error)]
pub enum GmopeError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error in {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("state error: {0}")]
    State(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint truncated at byte offset {offset}: {message}")]
    Truncated { offset: u64, message: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GmopeError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        GmopeError::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GmopeError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        GmopeError::Ingestion {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user-supplied configuration or inputs
    /// rather than by a failure during a run.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            GmopeError::Config(_)
                | GmopeError::Ingestion { .. }
                | GmopeError::Manifest(_)
                | GmopeError::Split(_)
        )
    }
}

pub type Result<T, E = GmopeError> = std::result::Result<T, E>;
