use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("epipolar geometry undefined: baseline norm {0:e} is below 1e-12")]
    ZeroBaseline(f64),
    #[error("non-positive depth {value} at pixel ({x}, {y})")]
    NonPositiveDepth { x: usize, y: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cached forward state does not match the backward inputs")]
    StateMismatch,
    #[error("bad initialization: {0}")]
    BadInit(String),
    #[error("non-finite gradient at step {step} in {group}")]
    NonFiniteGradient { step: usize, group: String },
    #[error("optimization diverged at step {step}: loss {loss} exceeded 10x the initial {initial} for 100 steps")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("synthetic scene rejected after {attempts} attempts: covered fraction {coverage:.3} below 0.5")]
    EmptyRender { attempts: usize, coverage: f64 },
    #[error("trajectory lengths differ ({0} vs {1}) or are shorter than 2")]
    LengthMismatch(usize, usize),
    #[error("scene manifest missing: {0}")]
    ManifestMissing(PathBuf),
    #[error("corrupt image {path}: {reason}")]
    CorruptImage { path: PathBuf, reason: String },
    #[error("dimension mismatch in {path}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        path: PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
