use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("kernel density {0:e} is below the degeneracy guard")]
    DegenerateDensity(f64),

    #[error("every observation was trimmed")]
    AllTrimmed,

    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("optimizer failed to converge: {0}")]
    NonConvergence(String),

    #[error("zero denominator in nuisance moment estimator")]
    ZeroDenominator,

    #[error("J matrix is numerically singular (condition number {0:e})")]
    SingularJ(f64),

    #[error("grid point t = {0} lies outside the estimated support")]
    OutsideSupport(f64),

    #[error("baseline deviance is zero (all responses equal)")]
    DegenerateBaseline,

    #[error("cell partition has no cell with positive empirical mass")]
    EmptyCell,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{failed} of {total} replications failed")]
    TooManyFailures { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
