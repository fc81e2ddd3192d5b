//! Crate-wide error type.
//!
//! Contract violations (shape mismatches, out-of-range arguments) panic via
//! `assert!` — they indicate caller bugs, not recoverable conditions. The
//! variants below cover everything a pipeline run can legitimately hit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data, reported with a 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Structurally valid input that cannot be processed (degenerate corpus,
    /// corrupt checkpoint, mismatched vocabulary).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite value produced where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class: 1 usage/config, 2 data,
    /// 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Parse { .. } | Error::Data(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
