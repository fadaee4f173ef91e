use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} non-positive)")]
    NotPositiveDefinite { pivot: usize },

    #[error("matrix is not symmetric: |m[{row}][{col}] - m[{col}][{row}]| exceeds tolerance")]
    AsymmetricInput { row: usize, col: usize },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("objective is not finite at the starting point")]
    NonFiniteAtStart,

    #[error("all {starts} optimizer starts failed")]
    AllStartsFailed { starts: usize },

    #[error("design matrix is singular")]
    SingularDesign,

    #[error("under-determined fit: n = {n}, d = {d}, K = {k} (need n >= d and n*d > K)")]
    Underdetermined { n: usize, d: usize, k: usize },

    #[error("information matrix is singular; model is not identifiable at this point")]
    NonIdentifiable,

    #[error("models are not nested: {0}")]
    NotNested(String),

    #[error("test statistic {statistic} is negative beyond the clamp window; refit the full model with more starts")]
    NegativeStatistic { statistic: f64 },

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("calibration needs at least one replication")]
    EmptyCalibration,

    #[error("{failed} of {total} replications failed (limit is 5%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error("simulated state became non-finite at step {step}")]
    NonFiniteState { step: usize },

    #[error("initial fit failed: {0}")]
    InitialFitFailed(Box<Error>),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line tool: 2 for usage or input
    /// problems, 3 for numerical or convergence failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::NonFiniteAtStart
            | Error::AllStartsFailed { .. }
            | Error::SingularDesign
            | Error::NonIdentifiable
            | Error::NegativeStatistic { .. }
            | Error::TooManyFailures { .. }
            | Error::NonFiniteState { .. }
            | Error::InitialFitFailed(_) => 3,
            _ => 2,
        }
    }
}
