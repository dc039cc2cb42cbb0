use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KvpError>;

#[derive(Debug, Error)]
pub enum KvpError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} bytes, got {actual}")]
    Length { expected: u64, actual: u64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("index out of bounds: {what} = {index}, limit {limit}")]
    Bounds { what: &'static str, index: usize, limit: usize },

    #[error("horizon error: cache {n} + future {f} exceeds sequence length {seq_len}")]
    Horizon { n: usize, f: usize, seq_len: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("budget {budget} outside [1, {max}]")]
    Budget { budget: usize, max: usize },

    #[error("nested set structure broken at b = {b}: {reason}")]
    Structure { b: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("identity error: {0}")]
    Identity(String),

    #[error("usage error: {0}")]
    Usage(String),
}

impl KvpError {
    /// Errors caused by bad input rather than a failure while doing the work.
    pub fn is_validation(&self) -> bool {
        !matches!(self, KvpError::Io(_) | KvpError::Numeric(_))
    }
}
