use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected dimension {expected}, got {got}")]
    InputShape { expected: usize, got: usize },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("non-finite state at RK4 stage {stage}")]
    NonFiniteState { stage: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("ground-truth trajectory {trajectory} diverged at step {step}")]
    Generation { trajectory: usize, step: usize },

    #[error("non-finite training loss on snippet {snippet}")]
    NonFiniteLoss { snippet: usize },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Process exit code: 1 usage/config, 2 runtime, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Usage(_)
            | Error::Parse { .. }
            | Error::Version { .. }
            | Error::InputShape { .. }
            | Error::InvalidDimension(_) => 1,
            Error::NotFound(_) | Error::Io { .. } => 3,
            _ => 2,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::InputShape { expected, got });
    }
    Ok(())
}
