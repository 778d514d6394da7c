//! Limiting eigenvalue distributions of correlated block Gaussian random
//! matrices.
//!
//! The covariance of the block entries is encoded as a linear map `η` on
//! small `d × d` matrices ([`EtaMap`]). The matrix-valued Cauchy transform
//! `𝒢(z)` of the limit solves the operator-valued semicircular equation
//!
//! ```text
//! z 𝒢(z) = I + η(𝒢(z)) 𝒢(z)
//! ```
//!
//! which [`solver`] solves by damped fixed-point iteration with Newton
//! refinement. [`spectrum`] turns grids of Cauchy transforms into densities,
//! CDFs, moments and channel capacities. [`oracle`] provides independent
//! checks: finite-`N` Monte Carlo sampling of the Gaussian ensembles,
//! Kolmogorov–Smirnov distances and the non-crossing pairing moment
//! recursion. [`nonsep`] handles non-separable correlated fading and
//! [`cli`] is the batch front end.

pub mod cli;
pub mod covariance;
mod error;
pub mod linalg;
pub mod nonsep;
pub mod oracle;
pub mod solver;
pub mod spectrum;

pub use covariance::{CovarianceSpec, EtaMap, ValidatedCovariance};
pub use error::{Error, Result};
pub use linalg::CMat;
pub use num_complex::Complex64;
pub use solver::{CauchySolution, SolverConfig};
pub use spectrum::SpectralDensity;
