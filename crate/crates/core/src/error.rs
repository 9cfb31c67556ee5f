use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An operation parameter is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A value lies outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),
    /// Caller-supplied data violates a precondition.
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// An API contract was broken by the caller (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),
    /// A numerical procedure failed (singular matrix, non-finite loss).
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    ///
    /// 2 for usage and configuration problems, 3 for numeric failures and
    /// 4 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Contract(_) => 2,
            Error::Numeric(_) | Error::Training(_) | Error::Domain(_) => 3,
            Error::Dimension(_)
            | Error::Input(_)
            | Error::Metric(_)
            | Error::Format(_)
            | Error::Io(_) => 4,
        }
    }
}
