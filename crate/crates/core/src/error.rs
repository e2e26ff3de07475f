use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("operator is not Hermitian: max|M - M^H| = {asymmetry:e} exceeds {tolerance:e}")]
    NotHermitian { asymmetry: f64, tolerance: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("state has zero norm")]
    ZeroNorm,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{what}: exponent {exponent:e} is outside the representable range")]
    Range { what: &'static str, exponent: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{what} did not converge: achieved {achieved:e}, required {required:e}")]
    NotConverged {
        what: &'static str,
        achieved: f64,
        required: f64,
    },

    #[error("forward states were not stored for this trajectory")]
    MissingStates,

    #[error("insufficient samples: {got} available, {needed} required")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("validity window violated: {0}")]
    WindowViolation(String),

    #[error("fit rejected: {0}")]
    FitRejected(String),

    #[error("{failed} of {total} trajectories failed (first error: {first})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: Box<Error>,
    },
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
