use patchfm_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data error: {0}")]
    Data(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("mask error: {0}")]
    Mask(String),
    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("generation failed: {0}")]
    Gen(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Shape(m) => Error::Shape(m),
            TensorError::Numeric(m) => Error::Numeric(m),
            TensorError::Mask(m) => Error::Mask(m),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
