use std::path::PathBuf;

/// Errors raised by the segmentation library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or image geometry does not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Dataset content is missing, unreadable or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values reached a place where they must not appear.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used by command-line front ends to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Checkpoint(_) => ErrorKind::Config,
            Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Csv(_) => {
                ErrorKind::Data
            }
            Error::Numeric(_) => ErrorKind::Numeric,
            Error::Shape(_) | Error::Tensor(_) | Error::Json(_) => ErrorKind::Config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
