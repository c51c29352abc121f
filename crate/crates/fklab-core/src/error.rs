use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FkError {
    #[error("grid needs an even node count n >= 8, got {0}")]
    InvalidGrid(usize),
    #[error("expected {expected} nodal values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("exponent must be finite and > 1, got {0}")]
    InvalidExponent(f64),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("need at least 2 time samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("theta must lie in [0, 1], got {0}")]
    InvalidTheta(f64),
    #[error("|theta - theta0| = {0} is outside the Neumann radius 1/2")]
    RadiusViolation(f64),
    #[error("Neumann series did not reach tolerance within {0} terms")]
    SeriesNotConverged(usize),
    #[error("singular boundary system (determinant {0:e})")]
    SingularBoundary(f64),
    #[error("eigensolver failed: {0}")]
    Eigensolver(String),
    #[error("eigenbasis condition number {0:e} too large; use the resolvent path")]
    IllConditionedBasis(f64),
    #[error("lambda = {0} lies on the branch cut (-inf, 0]")]
    BranchCut(num_complex::Complex64),
    #[error("lambda = {0} is too close to an eigenvalue (|M| = {1:e})")]
    NearEigenvalue(num_complex::Complex64, f64),
    #[error("contour quadrature tail {0:e} exceeds tolerance")]
    NonConvergentQuadrature(f64),
    #[error("solution blew up at t = {t}")]
    BlowUp {
        t: f64,
        last_good: Option<Box<crate::dynamics::SimState>>,
    },
    #[error("Picard defects diverged (defect {0:e})")]
    Diverged(f64),
    #[error("fixed-point iteration did not converge in {0} iterations")]
    MaxIterations(usize),
    #[error("linear solve failed: {0}")]
    LinearSolve(String),
}

pub type Result<T> = std::result::Result<T, FkError>;
