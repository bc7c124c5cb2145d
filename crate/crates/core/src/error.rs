use thiserror::Error;

/// Failures surfaced by the analyses.
///
/// Verdicts such as "not stabilizable" or "not observable" are data, not
/// errors; they live in the result types.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("budget exceeded: {what} = {size} exceeds cap {cap}")]
    BudgetExceeded {
        what: &'static str,
        size: usize,
        cap: usize,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn numerical(msg: impl Into<String>) -> Error {
    Error::NumericalFailure(msg.into())
}
