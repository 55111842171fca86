use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cannot satisfy spacing: placed {placed} of {requested} microphones after {attempts} attempts")]
    CannotSatisfySpacing {
        placed: usize,
        requested: usize,
        attempts: usize,
    },

    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    SampleRateMismatch { left: f64, right: f64 },

    #[error("echo arrives at sample {arrival} but the recording holds {window} samples; increase window")]
    WindowTooShort { arrival: usize, window: usize },

    #[error("underdetermined array: {nulls} null directions for {mics} microphones")]
    UnderdeterminedArray { nulls: usize, mics: usize },

    #[error("degenerate null set: singular value ratio {ratio:.3e} below tolerance")]
    DegenerateNullSet { ratio: f64 },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("backward called before a training-mode forward pass")]
    BackwardBeforeForward,

    #[error("non-smooth point: {0}")]
    NonSmoothPoint(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidParameter(_) | Error::Config(_) => ErrorCategory::Config,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::WindowTooShort { .. } => {
                ErrorCategory::Data
            }
            Error::ShapeMismatch { .. } => ErrorCategory::Data,
            Error::CannotSatisfySpacing { .. }
            | Error::SampleRateMismatch { .. }
            | Error::UnderdeterminedArray { .. }
            | Error::DegenerateNullSet { .. }
            | Error::BackwardBeforeForward
            | Error::NonSmoothPoint(_)
            | Error::Divergence { .. } => ErrorCategory::Numeric,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParameter(msg()))
    }
}
