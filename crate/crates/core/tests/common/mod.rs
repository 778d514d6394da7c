#![allow(dead_code)]

use blockspectra::covariance::{CovarianceSpec, TauEntry};
use blockspectra::linalg::c;
use blockspectra::CMat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMat {
    CMat::from_fn(rows, cols, |_, _| {
        c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
}

pub fn random_hermitian(rng: &mut ChaCha8Rng, n: usize) -> CMat {
    let m = random_matrix(rng, n, n);
    (&m + m.adjoint()) * c(0.5, 0.0)
}

pub fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> CMat {
    let m = random_matrix(rng, n, n);
    &m * m.adjoint()
}

/// A completely positive selfadjoint covariance on `d` blocks.
pub fn random_selfadjoint(rng: &mut ChaCha8Rng, d: usize, generators: usize) -> CovarianceSpec {
    let gens: Vec<CMat> = (0..generators)
        .map(|_| random_matrix(rng, d, d) * c(1.0 / (d as f64).sqrt(), 0.0))
        .collect();
    CovarianceSpec::from_generators(&gens).unwrap()
}

/// `τ(i,k;j,l) = Σ_m v_m(i,k) v_m(j,l)` with random real `v_m`.
pub fn random_hh_star(rng: &mut ChaCha8Rng, a: usize, b: usize) -> CovarianceSpec {
    let n = a * b;
    let vs: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut tau = Vec::new();
    for p in 0..n {
        for q in 0..n {
            let v: f64 = vs.iter().map(|v| v[p] * v[q]).sum();
            tau.push(TauEntry::new(p / b, p % b, q / b, q % b, v));
        }
    }
    CovarianceSpec::HhStar { a, b, tau }
}

pub fn max_diff(a: &CMat, b: &CMat) -> f64 {
    blockspectra::linalg::max_abs((a - b).iter())
}
