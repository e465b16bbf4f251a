use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at {what} index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("zero denominator in data-consistency solve at frame {frame}")]
    Singular { frame: usize },

    #[error("stale or mismatched denoiser cache: {0}")]
    StaleCache(String),

    #[error("non-finite training loss at outer loop {outer}, epoch {epoch}")]
    NonFiniteLoss { outer: usize, epoch: usize },

    #[error("{0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Machine-parsable category used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::InvalidArgument(_) | Error::Config(_) => "usage",
            Error::Format(_) => "format-error",
            Error::NonFinite { .. } | Error::Singular { .. } | Error::NonFiniteLoss { .. } | Error::StaleCache(_) => {
                "numeric-failure"
            }
            Error::Io { .. } => "io-error",
        }
    }

    /// Process exit status matching [`Error::category`].
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" => 2,
            "format-error" => 3,
            "numeric-failure" => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
