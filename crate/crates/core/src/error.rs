use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("time grid is not strictly increasing at index {index}")]
    NonMonotoneGrid { index: usize },
    #[error("time grid needs at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("non-finite value in time grid at index {index}")]
    NonFiniteGrid { index: usize },
    #[error("penalty operator `{which}` has rank {found}, expected {expected}")]
    NumericalRankFailure {
        which: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("warp endpoint {found} differs from required {expected}")]
    EndpointViolation { expected: f64, found: f64 },
    #[error("query time {query} outside domain [{lo}, {hi}]")]
    QueryOutOfDomain { query: f64, lo: f64, hi: f64 },
    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("prior covariance for warping penalty {gamma_w} is not positive definite")]
    SingularPriorCovariance { gamma_w: f64 },
    #[error("precision matrix for {block} is not positive definite")]
    SingularPrecision { block: &'static str },
    #[error("curves do not share the model grid: {0}")]
    InconsistentGrid(String),
    #[error("non-finite draw in block {block}")]
    NonFiniteDraw { block: String },
    #[error("sample of {got} rows is too small (need at least 2)")]
    DegenerateSample { got: usize },
    #[error("registration of partial curve failed: {0}")]
    OptimizerFailure(String),
    #[error("candidate window for the final registration time is empty")]
    EmptyWindow,
    #[error("observed block of the covariance is not positive definite")]
    SingularObservedBlock,
    #[error("original curves have identical derivatives; sls denominator is zero")]
    DegenerateDenominator,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
