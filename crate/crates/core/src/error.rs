use std::path::PathBuf;

use ctf_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CtfError {
    #[error(transparent)]
    Tensor(TensorError),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {message}")]
    Training { step: u64, message: String },
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<TensorError> for CtfError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Index(m) => Self::Index(m),
            TensorError::Shape(m) => Self::Shape(m),
            TensorError::Parameter(m) => Self::Parameter(m),
            other => Self::Tensor(other),
        }
    }
}

impl CtfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Self::Format { offset, message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, CtfError>;
