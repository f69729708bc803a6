use thiserror::Error;

/// Errors produced by kernel construction, distribution operations and
/// inference routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix that must be symmetric positive definite could not be
    /// factorized, even after the jitter escalation policy.
    #[error("matrix is not positive definite (after jitter up to {max_jitter:e}): {context}")]
    NotPositiveDefinite { context: String, max_jitter: f64 },

    /// A kernel recursion produced a value outside its analytic domain.
    #[error("numerical domain violation in layer {layer}: {detail}")]
    NumericalDomain { layer: usize, detail: String },

    /// Shapes of the supplied operands do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The requested operation is not defined for the given variant
    /// (e.g. a density query on a point-mass prior).
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Iterative training diverged.
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
