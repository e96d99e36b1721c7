//! Crate-wide error type.

use thiserror::Error;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad user input: malformed files, missing paths, invalid arguments.
    BadInput,
    /// Internal or contract failure.
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration is internally inconsistent (shape mismatches, invalid plans).
    #[error("configuration error: {0}")]
    Config(String),

    /// A runtime input violates a precondition (bad token sequence, empty mask).
    #[error("input error: {0}")]
    Input(String),

    /// An API was used out of order (e.g. backward on a consumed tape).
    #[error("usage error: {0}")]
    Usage(String),

    /// A serialized artifact is corrupt or truncated.
    #[error("format error: {0}")]
    Format(String),

    /// A federation message violates the protocol (mismatched shapes, bad weights).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Training produced a non-finite value.
    #[error("numeric error: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) => {
                ErrorKind::BadInput
            }
            Error::Usage(_) | Error::Protocol(_) | Error::NonFinite(_) => ErrorKind::Internal,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
