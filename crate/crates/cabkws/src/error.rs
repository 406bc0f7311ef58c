//! Error taxonomy shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// `Config` and friends map to CLI exit code 2 (usage/config errors), the
/// rest map to exit code 1 (runtime failures). See [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// A value violated a documented precondition (bad lambda, empty split, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor or matrix dimensions do not match the documented contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed input bytes (WAV header, manifest CSV, checkpoint, JSON).
    #[error("parse error: {0}")]
    Parse(String),

    /// Input is well-formed but in an encoding this crate does not handle.
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    /// A loss was requested on a trace that never computed the needed values.
    #[error("graph error: {0}")]
    Graph(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for usage/config errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
