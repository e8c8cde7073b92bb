use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("dataset {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] geopose_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn dataset(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Dataset { path: path.into(), msg: msg.into() }
    }

    /// 2 for usage, input and file problems, 1 for failures during compute.
    pub fn exit_code(&self) -> i32 {
        use geopose_core::Error as C;
        match self {
            Error::Core(C::Config(_) | C::Checkpoint(_) | C::UnknownParam(_)) => 2,
            Error::Core(_) => 1,
            _ => 2,
        }
    }
}
