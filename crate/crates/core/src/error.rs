//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatches, violated preconditions, malformed values.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A batch of the requested size cannot be placed on the series.
    #[error(
        "cannot place {requested} window pairs with minimum separation \
         {min_separation}: maximum feasible batch size is {max_feasible}"
    )]
    Capacity {
        requested: usize,
        min_separation: usize,
        max_feasible: usize,
    },

    /// Data file could not be parsed; `row` is 1-based and counts the
    /// header line if present.
    #[error("load error at row {row}: {message}")]
    Load { row: usize, message: String },

    /// Checkpoint file does not follow the expected layout.
    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
