use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MlsaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MlsaError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("gradient check invalid: {0}")]
    GradCheck(String),

    #[error("benchmark error: {0}")]
    Bench(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MlsaError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MlsaError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        MlsaError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MlsaError::Io { path: path.into(), source }
    }
}
