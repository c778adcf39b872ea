use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not a rotation")]
    NotARotation,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("static initialization failed: accelerometer variance {variance:.4e} exceeds {threshold:.4e}")]
    InitializationFailed { variance: f64, threshold: f64 },
    #[error("registration failed: {inliers} valid field samples (need {required})")]
    RegistrationFailed { inliers: usize, required: usize },
    #[error("time coverage gap: {0}")]
    Coverage(String),
    #[error("no extrinsic calibration for sensor {0}")]
    MissingExtrinsic(u16),
    #[error("optimization diverged: loss {loss:.4e} exceeds {limit:.4e}")]
    Diverged { loss: f64, limit: f64 },
    #[error("grid of {cells} cells exceeds the budget of {budget}")]
    GridBudget { cells: u64, budget: u64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}
