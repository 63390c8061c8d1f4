//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed caller input: bad shapes, out-of-range tokens, empty
    /// sequences where a value is required, incompatible checkpoints.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A forward primitive produced a non-finite value, or training hit a
    /// non-finite loss. The message names the offending tensor.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The gradient check could not run to completion (e.g. the loss
    /// function was found to be non-deterministic).
    #[error("gradient check aborted: {0}")]
    CheckAborted(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code for the CLI: 2 for invalid input, 3 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Numerical(_) | Error::CheckAborted(_) => 3,
        }
    }
}
