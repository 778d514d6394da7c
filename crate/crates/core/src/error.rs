use num_complex::Complex64;
use thiserror::Error;

use crate::solver::CauchySolution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range (bound {bound}) in {context}")]
    IndexOutOfRange {
        index: usize,
        bound: usize,
        context: String,
    },
    #[error("covariance entry {entry} contradicts its symmetric partner: expected {expected}, found {found}")]
    SymmetryViolation {
        entry: String,
        expected: Complex64,
        found: Complex64,
    },
    #[error("invalid block weights: {0}")]
    WeightError(String),
    #[error("sparsity pattern violated: {0}")]
    PatternViolation(String),
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("wrong covariance kind: expected {expected}, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("evaluation point {z} is not usable: {reason}")]
    InvalidPoint { z: Complex64, reason: String },
    #[error("no convergence at z = {} after {} iterations (residual {:.3e}){}", .best.z, .best.iterations, .best.residual, index_suffix(.index))]
    NoConvergence {
        best: Box<CauchySolution>,
        index: Option<usize>,
    },
    #[error("resolvent is singular at z = {z}")]
    SingularResolvent { z: Complex64 },
    #[error("Newton Jacobian is singular at z = {z}")]
    SingularJacobian { z: Complex64 },
    #[error("solution at z = {z} violates the positivity selection: max eigenvalue of Im G is {max_eig:.3e}")]
    PositivityViolation { z: Complex64, max_eig: f64 },
    #[error("ill-conditioned moment extraction: {0}")]
    IllConditioned(String),
    #[error("grid error: {0}")]
    GridError(String),
    #[error("density carries mass {mass:.3e} on the negative half line")]
    NegativeSupport { mass: f64 },
    #[error("entry covariance is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("matrix of size {n} is too large for dense sampling; reduce N")]
    TooLarge { n: usize },
    #[error("eigensolver failed: {0}")]
    Eigen(String),
    #[error("moment order {order} exceeds the supported maximum {max}")]
    OrderTooLarge { order: usize, max: usize },
}

fn index_suffix(index: &Option<usize>) -> String {
    match index {
        Some(i) => format!(" at grid index {i}"),
        None => String::new(),
    }
}
