//! Small dense complex linear algebra shared by the solver, the covariance
//! maps and the samplers.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Dense complex matrix used for every `d × d` quantity.
pub type CMat = DMatrix<Complex64>;

pub const I: Complex64 = Complex64::new(0.0, 1.0);

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// `(G + G*) / 2`.
pub fn real_part(g: &CMat) -> CMat {
    (g + g.adjoint()).scale(0.5)
}

/// `(G − G*) / (2i)`, a Hermitian matrix.
pub fn imag_part(g: &CMat) -> CMat {
    (g - g.adjoint()).map(|v| v / (2.0 * I))
}

pub fn hermitian_eigenvalues(m: &CMat) -> Vec<f64> {
    let sym = (m + m.adjoint()).scale(0.5);
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn max_hermitian_eigenvalue(m: &CMat) -> f64 {
    hermitian_eigenvalues(m).last().copied().unwrap_or(0.0)
}

pub fn min_hermitian_eigenvalue(m: &CMat) -> f64 {
    hermitian_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Largest eigenvalue of `Im G`; nonpositive for a Cauchy transform.
pub fn max_imag_eigenvalue(g: &CMat) -> f64 {
    max_hermitian_eigenvalue(&imag_part(g))
}

/// Replaces the imaginary part of `w` by its projection onto matrices with
/// eigenvalues `≤ −floor`.
pub fn project_negative_imag(w: &CMat, floor: f64) -> CMat {
    let im = imag_part(w);
    let eig = SymmetricEigen::new(im);
    let clamped = eig.eigenvalues.map(|v| v.min(-floor));
    let vecs = &eig.eigenvectors;
    let mut proj = vecs.clone();
    for (j, mut col) in proj.column_iter_mut().enumerate() {
        col *= Complex64::from(clamped[j]);
    }
    let im_proj = proj * vecs.adjoint();
    real_part(w) + im_proj * I
}

/// `Σ w_i [G]_ii`.
pub fn weighted_trace(weights: &[f64], g: &CMat) -> Complex64 {
    weights.iter().enumerate().map(|(i, w)| g[(i, i)] * *w).sum()
}

/// Normalized trace `tr_n(G) = (1/n) Tr G`.
pub fn normalized_trace(g: &CMat) -> Complex64 {
    if g.nrows() == 0 {
        return Complex64::new(0.0, 0.0);
    }
    g.trace() / g.nrows() as f64
}

/// Inverse via LU, `None` when singular or not finite.
pub fn inverse(m: &CMat) -> Option<CMat> {
    let inv = m.clone().lu().try_inverse()?;
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}

fn clamped_eigen(m: &CMat, tol: f64) -> Result<(CMat, Vec<f64>)> {
    let sym = (m + m.adjoint()).scale(0.5);
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -tol {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let vals = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    Ok((eig.eigenvectors, vals))
}

/// Factor a Hermitian PSD matrix as `L L*` through its eigendecomposition.
/// Eigenvalues in `[−tol, 0)` are clamped to zero; below that the matrix is
/// rejected.
pub fn psd_factor(m: &CMat, tol: f64) -> Result<CMat> {
    let (mut l, vals) = clamped_eigen(m, tol)?;
    for (j, mut col) in l.column_iter_mut().enumerate() {
        col *= Complex64::from(vals[j].sqrt());
    }
    Ok(l)
}

/// Positive square root of a Hermitian PSD matrix.
pub fn psd_sqrt(m: &CMat, tol: f64) -> Result<CMat> {
    let (vecs, vals) = clamped_eigen(m, tol)?;
    let mut scaled = vecs.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= Complex64::from(vals[j].sqrt());
    }
    Ok(scaled * vecs.adjoint())
}

/// Largest entry modulus.
pub fn max_abs<'a>(entries: impl IntoIterator<Item = &'a Complex64>) -> f64 {
    entries.into_iter().fold(0.0, |acc, v| acc.max(v.norm()))
}

pub fn is_hermitian(m: &CMat, tol: f64) -> bool {
    m.is_square() && max_abs(&(m - m.adjoint())) <= tol
}

pub fn to_faer(m: &CMat) -> faer::Mat<faer::c64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| {
        let v = m[(i, j)];
        faer::c64::new(v.re, v.im)
    })
}

/// Sorted eigenvalues of a large Hermitian matrix.
pub fn large_hermitian_eigenvalues(m: &faer::Mat<faer::c64>) -> Result<Vec<f64>> {
    let mut ev = m
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}
