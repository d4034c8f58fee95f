use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("stats error: {0}")]
    Stats(String),
    #[error("optimization error: {0}")]
    Optimization(String),
    #[error("training error at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },
    #[error("imputation error: {0}")]
    Imputation(String),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
