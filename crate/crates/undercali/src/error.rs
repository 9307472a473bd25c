//! Crate-wide error type.

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A dataset line (or other line-oriented input) failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// Matrix/tensor dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A structural invariant of the data model is violated.
    #[error("invalid data: {0}")]
    Invariant(String),
    /// Bad configuration (file or derived).
    #[error("config error: {0}")]
    Config(String),
    /// A masked metric was asked to average over zero observed cells.
    #[error("empty target: no observed cells under the mask")]
    EmptyTarget,
    /// A gradient or loss became NaN/inf; the offending tensor is named.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// Checkpoint file is malformed or inconsistent with the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
