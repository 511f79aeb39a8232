//! Crate-wide error type.

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// The policy network produced a non-finite value.
    #[error("policy numerical error: {0}")]
    PolicyNumerical(String),

    /// A policy was constructed or used with invalid parameters.
    #[error("policy config error: {0}")]
    PolicyConfig(String),

    /// Invalid configuration or precondition violation.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data (IDX stream, config file).
    #[error("format error: {0}")]
    Format(String),

    /// A non-finite loss or gradient was produced.
    #[error("numerical error at batch index {batch_index}: {message}")]
    Numerical { batch_index: usize, message: String },

    /// A downloaded or on-disk data file does not match its pinned digest.
    #[error("checksum mismatch for {file}: expected {expected}, got {actual}")]
    Checksum {
        file: String,
        expected: String,
        actual: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
