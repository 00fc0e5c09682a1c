use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("window contains no unpadded samples")]
    EmptySignal,
    #[error("mask plan is empty")]
    EmptyMask,
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("batch has no anchor with a same-class partner")]
    DegenerateBatch,
    #[error("stratification failed: {0}")]
    Stratification(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: unit mismatch: {message}")]
    Unit { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
