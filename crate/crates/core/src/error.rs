use thiserror::Error;

/// Failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation precondition (shape, binarity, range).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid or inconsistent configuration, rejected at construction.
    #[error("configuration error: {0}")]
    Config(String),
    /// A forward value became NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// Malformed on-disk data (dataset or checkpoint).
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
