//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by samplers, estimators and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Mismatched or invalid dimensions.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Covariance matrix is not positive definite.
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// Observed counts are all +1 or all -1; the probability MLE sits on the
    /// boundary and the closed-form inverse does not exist.
    #[error("saturated counts on channel {channel}: {detail}")]
    Saturated { channel: usize, detail: String },

    /// The estimate diverges (for example p-hat at 1/2 with a non-zero
    /// threshold, where the scale estimate has a pole).
    #[error("ill-posed estimate: {0}")]
    IllPosed(String),

    /// The schedule carries no amplitude information (all thresholds zero).
    #[error("unidentifiable: {0}")]
    Unidentifiable(String),

    /// An iterative solver ran out of iterations. Carries the last iterate.
    #[error("no convergence after {iterations} iterations (last iterate {last}, score {score})")]
    NonConvergence {
        iterations: usize,
        last: f64,
        score: f64,
    },

    /// Operation applied to a batch or schedule of the wrong kind.
    #[error("usage error: {0}")]
    Usage(String),

    /// Fisher information matrix is numerically singular.
    #[error("rank-deficient information matrix: {0}")]
    RankDeficient(String),

    /// Malformed serialized data.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
