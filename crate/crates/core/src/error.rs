//! Crate-wide error type, split by failure class so callers can map each
//! class to a distinct exit code.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// The caller violated an operation's contract: bad dimensions, invalid
    /// ranges, or arguments that make the requested computation meaningless.
    #[error("invalid argument: {0}")]
    Contract(String),

    /// The computation itself failed numerically: non-finite intermediates,
    /// diverging optimization, or a matrix that lost positive definiteness.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Randomized generation exhausted its rejection budget.
    #[error("generation failure: {0}")]
    Generation(String),

    /// Reading or writing an artifact failed at the OS level.
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),

    /// An artifact file exists but its contents are not what they claim.
    #[error("malformed artifact: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
