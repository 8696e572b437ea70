use thiserror::Error;

/// Errors raised by the runtime.
///
/// `Contract` covers every precondition violation (shape mismatches, bad
/// indices, out-of-range parameters). `Format` is reserved for malformed
/// files on disk.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for returning a contract violation.
macro_rules! contract {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Contract(format!($($arg)*)))
    };
}

/// `ensure!`-style helper for contract checks.
macro_rules! require {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)*)));
        }
    };
}

pub(crate) use contract;
pub(crate) use require;
