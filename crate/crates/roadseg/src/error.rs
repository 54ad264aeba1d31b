use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Failures of the file-backed layer. Each maps to a process exit code.
#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] roadseg_core::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset pairing: {0}")]
    Pairing(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: cannot decode image: {source}", path.display())]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{}: cannot encode image: {source}", path.display())]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("{}: malformed checkpoint: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for invalid input, 2 for failures while doing the work.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Core(roadseg_core::Error::Divergence { .. }) => 2,
            AppError::Core(_) | AppError::Config(_) | AppError::Pairing(_) | AppError::Decode { .. } => 1,
            AppError::Checkpoint { .. } => 1,
            AppError::Io { .. } | AppError::Encode { .. } | AppError::GradCheck(_) => 2,
        }
    }
}
