use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate element {triangle}: signed area {area:e}")]
    DegenerateElement { triangle: usize, area: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("linear solver breakdown: {context} (relative residual {residual:e})")]
    Solver { context: String, residual: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("vector is not discretely divergence-free (relative |Bv| = {residual:e})")]
    NotDivergenceFree { residual: f64 },

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("dimension guard exceeded: {dofs} dofs > limit {limit}")]
    DimensionGuard { dofs: usize, limit: usize },

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("study failed: {aborted} of {samples} samples aborted")]
    TooManyAborts { aborted: usize, samples: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
