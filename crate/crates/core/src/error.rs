use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cache capacity exceeded: need {needed} entries, capacity {capacity}")]
    Capacity { needed: usize, capacity: usize },

    #[error("sequence too long: {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// True for failures caused by bad input data (corpora, vocab, checkpoints).
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Data { .. } | Error::Vocab(_) | Error::Checkpoint { .. } | Error::Json(_) | Error::Io(_))
    }

    /// True for NaN/Inf and related numerical breakdowns.
    pub fn is_numeric_error(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
