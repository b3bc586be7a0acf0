//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Inputs with incompatible or non-square shapes.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// Inputs that violate a documented precondition.
    #[error("invalid {field}: {msg}")]
    Validation { field: String, msg: String },

    /// A numerical routine failed to converge or produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A problem size exceeds a hard guard.
    #[error("size guard exceeded: {what} = {got}, limit {limit}")]
    Size {
        what: String,
        got: usize,
        limit: usize,
    },

    /// An operation was called on a value in the wrong state or variant.
    #[error("invalid state: {0}")]
    State(String),

    /// Malformed binary or text input, with the byte offset of the defect.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
