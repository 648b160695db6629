use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A file or keyed entry that was expected to exist does not.
    #[error("not found: {0}")]
    NotFound(String),

    /// Input data violates a documented invariant (duplicate concept, empty set, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Caller broke an API precondition (dimension mismatch, empty batch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An image could not be decoded or processed.
    #[error("data error for sample `{sample_id}`: {message}")]
    Data { sample_id: String, message: String },

    /// A persisted artifact is truncated, corrupt, or bound to different inputs.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// The language-model client failed to produce a response.
    #[error("concept retrieval failed: {0}")]
    Retrieval(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::NotFound(path.display().to_string());
        }
        Error::Io { path, source }
    }
}
