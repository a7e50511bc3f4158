//! Error taxonomy shared across the crate.
//!
//! Variants are grouped by how the CLI reports them: usage problems exit
//! with code 1, data/IO problems with 2, numerical failures with 3.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Shape(_) | Error::Data(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::NonFinite(_) | Error::Numerical(_) => 3,
        }
    }
}
