use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CfbtError>;

#[derive(Debug, Error)]
pub enum CfbtError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl CfbtError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CfbtError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CfbtError::Config(_) => 1,
            CfbtError::Numeric(_) | CfbtError::Tensor(_) => 3,
            _ => 2,
        }
    }
}
