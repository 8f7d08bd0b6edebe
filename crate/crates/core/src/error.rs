//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("strategy error: {0}")]
    Strategy(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn cache(msg: impl Into<String>) -> Self {
        Error::Cache(msg.into())
    }
    pub fn strategy(msg: impl Into<String>) -> Self {
        Error::Strategy(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Exit code class for the CLI: configuration problems exit 2,
    /// everything else exits 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}
