use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ComaError {
    /// Invalid shapes, extents, indices or configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Misuse of an API, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// NaN or infinite values where finite ones are required.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An internal invariant failed to hold.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    /// Malformed or incompatible file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = ComaError> = std::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::ComaError::Config(format!($($arg)*))
    };
}

pub(crate) use config_err;
