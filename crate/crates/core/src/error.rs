//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received an empty candidate list.
    #[error("no candidates")]
    NoCandidates,

    /// All points of a cloud coincide; scale-to-unit normalization is undefined.
    #[error("degenerate cloud: all points identical")]
    DegenerateCloud,

    /// Tensor or feature dimensions do not chain.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// Aggregation produced a (near-)zero vector where a unit norm is required.
    #[error("zero descriptor: {0}")]
    ZeroDescriptor(String),

    /// Tuple mining found no valid anchor.
    #[error("no tuples: {0}")]
    NoTuples(String),

    /// Training loss became non-finite.
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    /// Gradient certification failed for one or more operations.
    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),

    /// Generic precondition violation.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// World generation could not place scenes at the requested spacing.
    #[error("cannot satisfy spacing: {0}")]
    SpacingUnsatisfiable(String),

    /// Checkpoint tensors disagree with the configured model shapes.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Filesystem failure, annotated with the path involved.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A persisted file failed to parse or validate.
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics themselves (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::GradCheckFailed(_))
    }
}
