use thiserror::Error;

/// Errors produced by construction and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The behavior policy assigns zero probability to an action the target
    /// policy can take, so importance ratios are undefined there.
    #[error("coverage violation at state {state}, action {action}: behavior probability is zero while target probability is positive")]
    CoverageViolation { state: usize, action: usize },

    #[error("negative trace coefficient at pair index {0}")]
    NegativeTrace(usize),

    /// The Neumann series behind an operator does not converge for the
    /// supplied trace coefficients.
    #[error("series does not converge: {0}")]
    NonConvergent(String),

    #[error("singular linear system")]
    SingularSystem,

    #[error("linear program: {0}")]
    Lp(String),

    /// Gradient iterations blew up; the caller should lower the step sizes.
    #[error("optimization diverged: {0}; try smaller learning rates")]
    Diverged(String),

    /// A weight vector puts mass on a pair the behavior policy never visits.
    #[error("support violation: {0}")]
    SupportViolation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
