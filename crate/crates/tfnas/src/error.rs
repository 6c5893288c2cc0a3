//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("width {width} outside valid range [{min}, {max}]")]
    WidthRange { width: usize, min: usize, max: usize },

    #[error("no latency entry for signature `{signature}`")]
    MissingEntry { signature: String },

    #[error("width {width} outside grid [{min}, {max}] for signature `{signature}`")]
    GridRange {
        signature: String,
        width: usize,
        min: usize,
        max: usize,
    },

    #[error("parse error ({context}): {message}")]
    Parse { context: String, message: String },

    #[error("bench error: {0}")]
    Bench(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("architecture error: {0}")]
    Arch(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("index error: {0}")]
    Index(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
