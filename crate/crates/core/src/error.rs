use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmnError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("gradient check failed at {location}: {message}")]
    CheckFailed { location: String, message: String },

    #[error("non-finite gradient in parameter `{0}`; update rejected")]
    NonFiniteGradient(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("parse error on line {line}: {message}")]
    ParseLine { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, LmnError>;

pub(crate) fn invalid(msg: impl Into<String>) -> LmnError {
    LmnError::InvalidArgument(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> LmnError {
    LmnError::ContractViolation(msg.into())
}
