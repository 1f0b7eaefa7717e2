use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CedError>;

#[derive(Debug, Error)]
pub enum CedError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("invalid label at line {line}: {label}")]
    InvalidLabel { line: usize, label: i64 },

    #[error("duplicate stream id {id:?} at line {line}")]
    DuplicateId { line: usize, id: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CedError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CedError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CedError::InvalidArgument(msg.into())
    }
}
