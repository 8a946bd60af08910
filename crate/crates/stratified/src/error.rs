use soars_core::CoreError;
use soars_nasnet::NasError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StratError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Nas(#[from] NasError),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl StratError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        StratError::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, StratError>;
