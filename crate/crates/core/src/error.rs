use thiserror::Error;

/// Errors raised by the solver pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("unsupported constraint layout: {0}")]
    UnsupportedLayout(String),

    #[error("linear system (B + rho I) is singular or not positive definite")]
    SingularSystem,

    #[error("residuals became non-finite at iteration {iteration}")]
    NumericalDivergence { iteration: usize },

    #[error("no (t1, t2) pattern satisfies the window conditions")]
    NoValidPattern,

    #[error("local constraint set of user {user} is infeasible")]
    InfeasibleLocalSet { user: usize },

    #[error("subset {index} has level {level} but {size} members")]
    InconsistentLevel { index: usize, level: usize, size: usize },

    #[error("duplicate subset at positions {first} and {second}")]
    DuplicateSubset { first: usize, second: usize },

    #[error("mixture weights must be positive and sum to 1 (sum = {0})")]
    WeightsNotNormalized(f64),

    #[error("node {0} has no moments or time estimate")]
    MissingMoments(usize),

    #[error("instance too large for the dense oracle ({0} variables)")]
    TooLarge(usize),

    #[error("constraint set is infeasible")]
    Infeasible,

    #[error("oracle failed: {0}")]
    OracleFailure(String),

    #[error("bad parameters: {0}")]
    BadParams(String),
}

pub type Result<T> = std::result::Result<T, Error>;
