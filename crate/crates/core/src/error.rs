use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Cached state does not match the parameters it is used with.
    #[error("internal consistency: {0}")]
    Inconsistent(String),
    /// Training produced a non-finite objective.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Pearson correlation of a constant vector.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
