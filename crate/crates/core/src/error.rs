use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: non-finite value produced by `{op}`")]
    Numeric { op: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error for `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),

    #[error("ingestion error in {file}: {message} (record {record}, byte offset {offset})")]
    Ingestion {
        file: PathBuf,
        record: usize,
        offset: u64,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(
        "certification of `{source_id}` -> `{target_id}` failed: deviation {deviation:e} exceeds {tolerance:e}"
    )]
    Certification {
        source_id: String,
        target_id: String,
        deviation: f64,
        tolerance: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
