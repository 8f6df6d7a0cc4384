use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants map onto the CLI exit codes: configuration and usage
/// problems exit with 2, data problems with 3, numeric failures with 4.
#[derive(Debug, Error)]
pub enum GramError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl GramError {
    pub fn config(msg: impl Into<String>) -> Self {
        GramError::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        GramError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        GramError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        GramError::Numeric(msg.into())
    }
}

pub type Result<T, E = GramError> = std::result::Result<T, E>;
