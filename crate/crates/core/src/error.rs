use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("cannot encode image {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format version {found} is incompatible (expected {expected})")]
    IncompatibleVersion { found: u32, expected: u32 },

    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("non-finite loss at scale {scale}, iteration {iteration}")]
    Diverged { scale: usize, iteration: usize },

    #[error("k = {k} downscales the image below the generator's minimum working size; maximum admissible k is {max_k}")]
    InadmissibleIterations { k: usize, max_k: usize },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for the CLI: runtime failures (divergence, an
    /// inadmissible iteration count) map to 1, input/config/I-O problems to 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } | Error::InadmissibleIterations { .. } => 1,
            _ => 2,
        }
    }
}
