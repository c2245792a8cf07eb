//! Error type shared across the crate.
//!
//! Variants are grouped by how the CLI maps them to exit codes: bad input or
//! I/O (usage, exit 1), numerical failure (exit 2), violated internal
//! contract (exit 3).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, arguments, or file contents.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    /// Non-finite values, divergence, or other numerical failure.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An internal invariant did not hold.
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Exit code category used by the CLI: 1 usage, 2 numerical, 3 invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Io { .. } | Error::Format(_) => 1,
            Error::Numerical(_) => 2,
            Error::Invariant(_) => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}
