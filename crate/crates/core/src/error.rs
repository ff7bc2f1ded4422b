use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the inpainting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error("mask generation failed: ratio window not reached within {budget} retries")]
    MaskBudget { budget: usize },

    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),

    #[error("checkpoint incompatible with current configuration: {0}")]
    Incompatible(String),

    #[error("model capability error: {0}")]
    Capability(String),

    #[error("training aborted at step {step}: loss part `{part}` is not finite (last good checkpoint: {})",
        last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    TrainingAbort {
        step: u64,
        part: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Codec { .. } | Error::MissingArtifacts(_) => 2,
            Error::TrainingAbort { .. } => 3,
            _ => 1,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Validation(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
