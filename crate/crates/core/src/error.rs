use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarpeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence of length {len} exceeds context length {context}")]
    ContextExceeded { len: usize, context: usize },

    #[error("insufficient candidates: need {needed} usable candidate bases, found {available}")]
    InsufficientCandidates { needed: usize, available: usize },

    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarpeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        HarpeError::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, HarpeError>;
