use thiserror::Error;

/// Failure classes shared by every solver in the crate.
///
/// The variants map one-to-one onto the CLI exit codes, so callers can
/// route an error without inspecting its message.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Input violates a documented invariant (probabilities, monotone data, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// The requested instance does not fit the configured size budget.
    #[error("resource error: {0}")]
    Resource(String),

    /// A numerical procedure failed (no root, crossing characteristics, CFL, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A time or capacity index lies outside the solved range.
    #[error("out of range: {0}")]
    Range(String),

    /// Reading or writing an artifact failed.
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn range(msg: impl Into<String>) -> Error {
    Error::Range(msg.into())
}
