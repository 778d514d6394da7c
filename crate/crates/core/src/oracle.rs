//! Independent checks of the solver: finite-`N` Monte Carlo samples of the
//! Gaussian block ensembles, Kolmogorov–Smirnov distances, histograms and
//! the non-crossing pairing moment recursion.

use faer::{c64, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{validate_covariance, CovarianceSpec, EtaMap, SigmaEntry, CHOI_TOL};
use crate::error::{Error, Result};
use crate::linalg::{identity, large_hermitian_eigenvalues, psd_factor, psd_sqrt, weighted_trace, CMat};
use crate::nonsep::CorrelationFamily;

/// Largest matrix dimension sampled densely.
pub const MAX_DIMENSION: usize = 12_000;
/// Largest moment order of the pairing recursion.
pub const MAX_NC2_ORDER: usize = 16;

/// Which Hermitian matrix a sample's eigenvalues belong to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralForm {
    /// The selfadjoint matrix `X` itself (or the hermitization of `H`).
    Selfadjoint,
    /// `HH*` of the normalized channel matrix.
    Gram,
}

/// One realization of a random block matrix.
#[derive(Clone, Debug)]
pub struct EnsembleSample {
    pub seed: u64,
    pub replicate: u64,
    pub block_size: usize,
    /// `X` for selfadjoint ensembles, `H` for channel ensembles.
    pub matrix: Mat<c64>,
    pub form: SpectralForm,
    /// Sorted eigenvalues of the matrix named by `form`.
    pub eigenvalues: Vec<f64>,
}

/// Block indices `(i, j)` whose blocks share one shape, with the factor of
/// their joint entry covariance.
#[derive(Clone, Debug)]
struct ClassPair {
    row_class: usize,
    col_class: usize,
    members: Vec<(usize, usize)>,
    /// `L L*` is the covariance of the member entries at one position.
    factor: CMat,
}

#[derive(Clone, Debug)]
enum Plan {
    Selfadjoint {
        alpha: Vec<f64>,
        class_of: Vec<usize>,
        pairs: Vec<ClassPair>,
    },
    Channel {
        a: usize,
        b: usize,
        factor: CMat,
    },
    Fading {
        psi_sqrt: Vec<CMat>,
        psi_hat_sqrt: Vec<CMat>,
    },
}

/// Draws realizations of one ensemble; all factorizations are done once.
#[derive(Clone, Debug)]
pub struct Sampler {
    plan: Plan,
}

/// Factor of an entry covariance, computed per connected component so that
/// uncorrelated entries stay exactly uncorrelated.
fn sampling_factor(cov: &CMat) -> Result<CMat> {
    let n = cov.nrows();
    let scale = crate::linalg::max_abs(cov.iter()).max(1.0);
    let mut component = vec![usize::MAX; n];
    let mut count = 0;
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        component[start] = count;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if component[v] == usize::MAX && (cov[(u, v)].norm() > 0.0 || cov[(v, u)].norm() > 0.0) {
                    component[v] = count;
                    stack.push(v);
                }
            }
        }
        count += 1;
    }
    let mut factor = CMat::zeros(n, n);
    for c in 0..count {
        let idx: Vec<usize> = (0..n).filter(|i| component[*i] == c).collect();
        let sub = CMat::from_fn(idx.len(), idx.len(), |a, b| cov[(idx[a], idx[b])]);
        let l = psd_factor(&sub, CHOI_TOL * scale)?;
        for (a, ia) in idx.iter().enumerate() {
            for (b, ib) in idx.iter().enumerate() {
                factor[(*ia, *ib)] = l[(a, b)];
            }
        }
    }
    Ok(factor)
}

fn classes(alpha: &[f64]) -> Vec<usize> {
    let mut reps: Vec<f64> = Vec::new();
    alpha
        .iter()
        .map(|a| match reps.iter().position(|r| (r - a).abs() <= 1e-12) {
            Some(c) => c,
            None => {
                reps.push(*a);
                reps.len() - 1
            }
        })
        .collect()
}

fn sigma_lookup(sigma: &[SigmaEntry]) -> std::collections::HashMap<(usize, usize, usize, usize), c64> {
    sigma.iter().map(|e| ((e.i, e.j, e.k, e.l), e.value)).collect()
}

impl Sampler {
    pub fn new(spec: &CovarianceSpec) -> Result<Self> {
        let validated = validate_covariance(spec.clone())?;
        if validated.positivity_warning() {
            return Err(Error::NotPsd {
                min_eigenvalue: validated.choi_min_eigenvalue(),
            });
        }
        let plan = match validated.spec() {
            CovarianceSpec::HhStar { a, b, tau } => {
                // T[(i,k),(j,l)] = τ(i,k;j,l) = E[h⁽ⁱᵏ⁾ conj h⁽ʲˡ⁾] up to scale
                let mut t = CMat::zeros(a * b, a * b);
                for e in tau {
                    t[(e.i * b + e.k, e.j * b + e.l)] = c64::new(e.value, 0.0);
                }
                Plan::Channel {
                    a: *a,
                    b: *b,
                    factor: sampling_factor(&t)?,
                }
            }
            other => {
                let (alpha, sigma) = match other {
                    CovarianceSpec::SelfAdjoint { d, sigma } => (vec![1.0 / *d as f64; *d], sigma),
                    CovarianceSpec::Rectangular { alpha, sigma } => (alpha.clone(), sigma),
                    CovarianceSpec::HhStar { .. } => unreachable!(),
                };
                let class_of = classes(&alpha);
                let n_classes = class_of.iter().max().map_or(0, |m| m + 1);
                let lookup = sigma_lookup(sigma);
                let d = alpha.len();
                let mut pairs = Vec::new();
                for c1 in 0..n_classes {
                    for c2 in c1..n_classes {
                        let members: Vec<(usize, usize)> = (0..d)
                            .flat_map(|i| (0..d).map(move |j| (i, j)))
                            .filter(|(i, j)| class_of[*i] == c1 && class_of[*j] == c2)
                            .collect();
                        // E[a⁽ⁱʲ⁾_rp conj a⁽ˡᵏ⁾_rp] = σ(i,j;k,l)/n
                        let m = members.len();
                        let mut cov = CMat::zeros(m, m);
                        for (s, (i, j)) in members.iter().enumerate() {
                            for (u, (l, k)) in members.iter().enumerate() {
                                if let Some(v) = lookup.get(&(*i, *j, *k, *l)) {
                                    cov[(s, u)] = *v;
                                }
                            }
                        }
                        pairs.push(ClassPair {
                            row_class: c1,
                            col_class: c2,
                            members,
                            factor: sampling_factor(&cov)?,
                        });
                    }
                }
                Plan::Selfadjoint { alpha, class_of, pairs }
            }
        };
        Ok(Self { plan })
    }

    /// Channel `H = n^{-1/2} Σ_s (√Ψ_s ⊗ I_N) Z_s (√Ψ̂_s ⊗ I_N)` with iid
    /// standard complex Gaussian `Z_s` and `n = pN`. Requires `p = q`.
    pub fn fading(family: &CorrelationFamily) -> Result<Self> {
        if family.p() != family.q() {
            return Err(Error::BadParameter(format!(
                "sampling needs a square channel, got p = {} and q = {}",
                family.p(),
                family.q()
            )));
        }
        let sq = |m: &CMat| psd_sqrt(m, 1e-10);
        Ok(Self {
            plan: Plan::Fading {
                psi_sqrt: family.psi().iter().map(sq).collect::<Result<_>>()?,
                psi_hat_sqrt: family.psi_hat().iter().map(sq).collect::<Result<_>>()?,
            },
        })
    }

    /// The form whose eigenvalues samples carry by default.
    pub fn form(&self) -> SpectralForm {
        match self.plan {
            Plan::Selfadjoint { .. } => SpectralForm::Selfadjoint,
            _ => SpectralForm::Gram,
        }
    }

    /// Realization `replicate` of the stream seeded by `seed`.
    pub fn sample(&self, block_size: usize, seed: u64, replicate: u64) -> Result<EnsembleSample> {
        if block_size == 0 {
            return Err(Error::BadParameter("block size N must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(replicate);
        let matrix = match &self.plan {
            Plan::Selfadjoint { alpha, class_of, pairs } => {
                sample_selfadjoint(alpha, class_of, pairs, block_size, &mut rng)?
            }
            Plan::Channel { a, b, factor } => sample_channel(*a, *b, factor, block_size, &mut rng)?,
            Plan::Fading { psi_sqrt, psi_hat_sqrt } => sample_fading(psi_sqrt, psi_hat_sqrt, block_size, &mut rng)?,
        };
        let form = self.form();
        let eigenvalues = spectrum_of(&matrix, form)?;
        Ok(EnsembleSample {
            seed,
            replicate,
            block_size,
            matrix,
            form,
            eigenvalues,
        })
    }

    /// Eigenvalues of `realizations` independent samples, in replicate
    /// order.
    pub fn pooled_spectra(&self, block_size: usize, seed: u64, realizations: usize) -> Result<Vec<Vec<f64>>> {
        (0..realizations as u64)
            .into_par_iter()
            .map(|r| self.sample(block_size, seed, r).map(|s| s.eigenvalues))
            .collect()
    }
}

fn complex_normal(rng: &mut ChaCha8Rng) -> c64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    c64::new(re * s, im * s)
}

fn correlated(factor: &CMat, scale: f64, rng: &mut ChaCha8Rng) -> Vec<c64> {
    let m = factor.ncols();
    let xi: Vec<c64> = (0..m).map(|_| complex_normal(rng)).collect();
    (0..factor.nrows())
        .map(|r| (0..m).map(|k| factor[(r, k)] * xi[k]).sum::<c64>() * scale)
        .collect()
}

fn check_size(n: usize) -> Result<()> {
    if n > MAX_DIMENSION {
        return Err(Error::TooLarge { n });
    }
    Ok(())
}

fn sample_selfadjoint(
    alpha: &[f64],
    class_of: &[usize],
    pairs: &[ClassPair],
    block_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Mat<c64>> {
    let d = alpha.len();
    let total = (d * block_size) as f64;
    let sizes: Vec<usize> = alpha.iter().map(|a| (a * total).round() as usize).collect();
    if sizes.contains(&0) {
        return Err(Error::BadParameter(format!(
            "block size N = {block_size} leaves an empty block"
        )));
    }
    let mut offsets = vec![0; d];
    for i in 1..d {
        offsets[i] = offsets[i - 1] + sizes[i - 1];
    }
    let n: usize = sizes.iter().sum();
    check_size(n)?;
    let class_size = |c: usize| sizes[class_of.iter().position(|x| *x == c).expect("class is used")];
    let scale = 1.0 / (n as f64).sqrt();
    let mut x = Mat::<c64>::zeros(n, n);
    for pair in pairs {
        let rows = class_size(pair.row_class);
        let cols = class_size(pair.col_class);
        let diagonal = pair.row_class == pair.col_class;
        for r in 0..rows {
            for p in 0..cols {
                if diagonal && p < r {
                    continue;
                }
                let v = correlated(&pair.factor, scale, rng);
                if diagonal && p == r {
                    // a⁽ⁱʲ⁾_rr = conj a⁽ʲⁱ⁾_rr: symmetrize the draw
                    let s = std::f64::consts::FRAC_1_SQRT_2;
                    for (m, (i, j)) in pair.members.iter().enumerate() {
                        let t = pair
                            .members
                            .iter()
                            .position(|e| *e == (*j, *i))
                            .expect("diagonal class pairs are closed under transposition");
                        x[(offsets[*i] + r, offsets[*j] + r)] = (v[m] + v[t].conj()) * s;
                    }
                } else {
                    for (m, (i, j)) in pair.members.iter().enumerate() {
                        x[(offsets[*i] + r, offsets[*j] + p)] = v[m];
                        x[(offsets[*j] + p, offsets[*i] + r)] = v[m].conj();
                    }
                }
            }
        }
    }
    Ok(x)
}

fn sample_channel(a: usize, b: usize, factor: &CMat, block_size: usize, rng: &mut ChaCha8Rng) -> Result<Mat<c64>> {
    let nn = block_size;
    check_size((a + b) * nn)?;
    let scale = 1.0 / (((a + b) * nn) as f64).sqrt();
    let mut h = Mat::<c64>::zeros(a * nn, b * nn);
    for r in 0..nn {
        for p in 0..nn {
            let v = correlated(factor, scale, rng);
            for i in 0..a {
                for k in 0..b {
                    h[(i * nn + r, k * nn + p)] = v[i * b + k];
                }
            }
        }
    }
    Ok(h)
}

fn kron_identity(m: &CMat, nn: usize) -> Mat<c64> {
    let p = m.nrows();
    Mat::from_fn(p * nn, p * nn, |r, c| {
        if r % nn == c % nn {
            m[(r / nn, c / nn)]
        } else {
            c64::new(0.0, 0.0)
        }
    })
}

fn sample_fading(
    psi_sqrt: &[CMat],
    psi_hat_sqrt: &[CMat],
    block_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Mat<c64>> {
    let p = psi_sqrt[0].nrows();
    let n = p * block_size;
    check_size(2 * n)?;
    let scale = c64::new(1.0 / (n as f64).sqrt(), 0.0);
    let mut h = Mat::<c64>::zeros(n, n);
    for (left, right) in psi_sqrt.iter().zip(psi_hat_sqrt) {
        let z = Mat::from_fn(n, n, |_, _| complex_normal(rng));
        let term = kron_identity(left, block_size) * &z * kron_identity(right, block_size);
        h += term;
    }
    Ok(Mat::from_fn(n, n, |i, j| h[(i, j)] * scale))
}

fn is_exactly_hermitian(m: &Mat<c64>) -> bool {
    m.nrows() == m.ncols() && (0..m.nrows()).all(|i| (0..=i).all(|j| m[(i, j)] == m[(j, i)].conj()))
}

fn spectrum_of(m: &Mat<c64>, form: SpectralForm) -> Result<Vec<f64>> {
    match form {
        SpectralForm::Gram => large_hermitian_eigenvalues(&(m * m.adjoint())),
        SpectralForm::Selfadjoint if is_exactly_hermitian(m) => large_hermitian_eigenvalues(m),
        SpectralForm::Selfadjoint => {
            let (r, c) = (m.nrows(), m.ncols());
            let x = Mat::from_fn(r + c, r + c, |i, j| match (i < r, j < r) {
                (true, false) => m[(i, j - r)],
                (false, true) => m[(j, i - r)].conj(),
                _ => c64::new(0.0, 0.0),
            });
            large_hermitian_eigenvalues(&x)
        }
    }
}

/// Eigenvalues of the sample's matrix in the requested form: `X` itself
/// (hermitizing a channel matrix) or `HH*`.
pub fn empirical_spectrum(sample: &EnsembleSample, form: SpectralForm) -> Result<Vec<f64>> {
    if form == sample.form && !sample.eigenvalues.is_empty() {
        return Ok(sample.eigenvalues.clone());
    }
    spectrum_of(&sample.matrix, form)
}

/// One realization with replicate index 0.
pub fn sample_block_gaussian(spec: &CovarianceSpec, block_size: usize, seed: u64) -> Result<EnsembleSample> {
    Sampler::new(spec)?.sample(block_size, seed, 0)
}

/// `sup_x |F_n(x) − F(x)|` over the sample points, using both one-sided
/// limits of the empirical distribution function.
pub fn ks_distance(eigenvalues: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = eigenvalues.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Bin edges and counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Histogram with Freedman–Diaconis bin width `2·IQR·n^{-1/3}`.
pub fn histogram(values: &[f64]) -> Result<Histogram> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::BadParameter("histogram needs finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let width = 2.0 * iqr / (sorted.len() as f64).cbrt();
    let bins = if width > 0.0 && hi > lo {
        (((hi - lo) / width).ceil() as usize).clamp(1, 10_000)
    } else {
        1
    };
    let step = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|k| lo + step * k as f64).collect();
    let mut counts = vec![0u64; bins];
    for v in &sorted {
        let k = (((v - lo) / step) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Matrix moment `E[s^m]` of the operator-valued semicircular element with
/// covariance `η`, from `M_m = Σ_{j+k=m−2} η(M_j) M_k`, `M_0 = I`. Odd
/// moments vanish.
pub fn nc2_moment(eta: &EtaMap, m: usize) -> Result<CMat> {
    if m > MAX_NC2_ORDER {
        return Err(Error::OrderTooLarge {
            order: m,
            max: MAX_NC2_ORDER,
        });
    }
    if !eta.is_square() {
        return Err(Error::DimensionMismatch {
            expected: (eta.dim_in(), eta.dim_in()),
            found: (eta.dim_out(), eta.dim_out()),
        });
    }
    let d = eta.dim_in();
    if m % 2 == 1 {
        return Ok(CMat::zeros(d, d));
    }
    let mut moments: Vec<CMat> = vec![identity(d)];
    for n in (2..=m).step_by(2) {
        let mut acc = CMat::zeros(d, d);
        for j in (0..=n - 2).step_by(2) {
            acc += eta.apply_unchecked(&moments[j / 2]) * &moments[(n - 2 - j) / 2];
        }
        moments.push(acc);
    }
    Ok(moments.pop().expect("nonempty"))
}

/// `Σ w_i [M_m]_ii`.
pub fn nc2_trace_moment(eta: &EtaMap, weights: &[f64], m: usize) -> Result<f64> {
    Ok(weighted_trace(weights, &nc2_moment(eta, m)?).re)
}
