use alloc::string::String;

/// Errors produced by the estimation and simulation routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("cannot initialize filter: {0}")]
    InitializationImpossible(String),

    #[error("ill-conditioned update: innovation covariance is not positive definite")]
    IllConditionedUpdate,

    #[error("no steady state after {iterations} iterations (residual {residual:e})")]
    NoSteadyState { iterations: usize, residual: f64 },

    #[error("integration step too large: state became non-finite at t = {t}")]
    StepTooLarge { t: f64 },

    #[error("fit failed after {iterations} iterations: {reason}")]
    FitFailed {
        reason: String,
        iterations: usize,
        /// Last iterate `[S_ph, S_at, T2, omega0]`.
        last: [f64; 4],
    },

    #[error("at least {needed} replicate runs are required, got {got}")]
    InsufficientReplicates { needed: usize, got: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn dim_mismatch(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}
