use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("mask error: {0}")]
    Mask(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
