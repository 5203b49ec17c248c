use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}
