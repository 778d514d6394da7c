//! Spectral densities from Cauchy transforms, and the quantities read off
//! them: distribution functions, moments and channel capacity.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::solver::{Law, LawPoint, SolverConfig};

/// Allowed deviation of the total mass from one.
pub const MASS_TOL: f64 = 5e-3;
/// Density below which a grid endpoint counts as outside the support.
pub const BOUNDARY_TOL: f64 = 1e-6;
/// Pre-clip negative values beyond this indicate a solver problem.
pub const NEGATIVE_EXCURSION_TOL: f64 = 1e-3;
pub const DEFAULT_POINTS: usize = 512;
/// Default `ε₂` relative to the grid span.
pub const DEFAULT_RELATIVE_EPSILON: f64 = 1e-3;
const MAX_EXPANSIONS: usize = 8;

/// Samples `(x, p(x))` of a density plus an optional point mass at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDensity {
    pub xs: Vec<f64>,
    pub ps: Vec<f64>,
    pub atom_at_zero: f64,
    /// `(ε₁, ε₂)` used by the inversion; zero for densities built directly.
    pub epsilon_used: (f64, f64),
    /// Most negative value before clipping (zero if none).
    pub min_raw: f64,
}

fn check_grid(xs: &[f64]) -> Result<()> {
    if xs.len() < 2 {
        return Err(Error::GridError("a grid needs at least two points".into()));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::GridError("grid contains non-finite points".into()));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::GridError("grid must be strictly increasing".into()));
    }
    Ok(())
}

impl SpectralDensity {
    /// A tabulated density; negative samples are clipped.
    pub fn new(xs: Vec<f64>, ps: Vec<f64>, atom_at_zero: f64) -> Result<Self> {
        check_grid(&xs)?;
        if ps.len() != xs.len() {
            return Err(Error::GridError(format!(
                "{} density values for {} grid points",
                ps.len(),
                xs.len()
            )));
        }
        if !(0.0..=1.0).contains(&atom_at_zero) {
            return Err(Error::BadParameter(format!(
                "atom mass {atom_at_zero} is outside [0, 1]"
            )));
        }
        let min_raw = ps.iter().copied().fold(0.0, f64::min);
        Ok(Self {
            xs,
            ps: ps.into_iter().map(|p| p.max(0.0)).collect(),
            atom_at_zero,
            epsilon_used: (0.0, 0.0),
            min_raw,
        })
    }

    /// Integral of the density plus the atom.
    pub fn mass(&self) -> f64 {
        trapezoid(&self.xs, &self.ps) + self.atom_at_zero
    }

    /// True when the mass is within [`MASS_TOL`] of one.
    pub fn mass_ok(&self) -> bool {
        (self.mass() - 1.0).abs() <= MASS_TOL
    }
}

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Density from Cauchy transform values `(x, G(x+iε₁), G(x+iε₂))` with
/// `ε₁ = 2ε₂`:
///
/// ```text
/// p(x) = −(1/π) Im[2G(x+iε₂) − G(x+iε₁)]
/// ```
///
/// which cancels the first-order bias in `ε`. Results are clipped at zero.
pub fn stieltjes_invert(values: &[(f64, Complex64, Complex64)], epsilon2: f64) -> Result<SpectralDensity> {
    if !(epsilon2 > 0.0 && epsilon2.is_finite()) {
        return Err(Error::GridError(format!("epsilon must be positive, got {epsilon2}")));
    }
    let xs: Vec<f64> = values.iter().map(|v| v.0).collect();
    check_grid(&xs)?;
    let raw: Vec<f64> = values
        .iter()
        .map(|(_, g1, g2)| -(2.0 * g2 - g1).im / std::f64::consts::PI)
        .collect();
    let mut density = SpectralDensity::new(xs, raw, 0.0)?;
    density.epsilon_used = (2.0 * epsilon2, epsilon2);
    Ok(density)
}

/// Tabulated distribution function of a [`SpectralDensity`].
#[derive(Clone, Debug)]
pub struct Cdf {
    xs: Vec<f64>,
    cumulative: Vec<f64>,
    atom: f64,
}

impl Cdf {
    /// `F(x)`, linear between grid points, `0` left of the grid and the
    /// total mass right of it.
    pub fn eval(&self, x: f64) -> f64 {
        let jump = if x >= 0.0 { self.atom } else { 0.0 };
        let n = self.xs.len();
        let cont = if x <= self.xs[0] {
            0.0
        } else if x >= self.xs[n - 1] {
            self.cumulative[n - 1]
        } else {
            let k = self.xs.partition_point(|v| *v <= x);
            let (x0, x1) = (self.xs[k - 1], self.xs[k]);
            let t = (x - x0) / (x1 - x0);
            self.cumulative[k - 1] * (1.0 - t) + self.cumulative[k] * t
        };
        cont + jump
    }

    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0) + self.atom
    }
}

/// `F(x) = atom·[x ≥ 0] + ∫_{x₀}^{x} p`.
pub fn cdf(density: &SpectralDensity) -> Cdf {
    let mut cumulative = Vec::with_capacity(density.xs.len());
    let mut acc = 0.0;
    cumulative.push(0.0);
    for (x, p) in density.xs.windows(2).zip(density.ps.windows(2)) {
        acc += 0.5 * (x[1] - x[0]) * (p[0] + p[1]);
        cumulative.push(acc);
    }
    Cdf {
        xs: density.xs.clone(),
        cumulative,
        atom: density.atom_at_zero,
    }
}

/// Mass of the continuous part on `x < cutoff`.
fn mass_below(density: &SpectralDensity, cutoff: f64) -> f64 {
    let xs = &density.xs;
    let ps = &density.ps;
    let mut m = 0.0;
    for k in 1..xs.len() {
        if xs[k - 1] >= cutoff {
            break;
        }
        let x1 = xs[k].min(cutoff);
        let t = (x1 - xs[k - 1]) / (xs[k] - xs[k - 1]);
        let p1 = ps[k - 1] + t * (ps[k] - ps[k - 1]);
        m += 0.5 * (x1 - xs[k - 1]) * (ps[k - 1] + p1);
    }
    m
}

/// `∫ log₂(1 + snr·λ) dμ(λ)` in bits per dimension.
pub fn capacity(density: &SpectralDensity, snr: f64) -> Result<f64> {
    if !(snr > 0.0 && snr.is_finite()) {
        return Err(Error::BadParameter(format!("snr must be positive, got {snr}")));
    }
    let cutoff = -10.0 * density.epsilon_used.1;
    let negative = mass_below(density, cutoff);
    if negative > MASS_TOL {
        return Err(Error::NegativeSupport { mass: negative });
    }
    let ys: Vec<f64> = density
        .xs
        .iter()
        .zip(&density.ps)
        .map(|(x, p)| (snr * x.max(0.0)).ln_1p() / std::f64::consts::LN_2 * p)
        .collect();
    Ok(trapezoid(&density.xs, &ys).max(0.0))
}

/// `∫ xᵏ dμ(x)`, including the atom.
pub fn moments_from_density(density: &SpectralDensity, k: u32) -> f64 {
    let ys: Vec<f64> = density
        .xs
        .iter()
        .zip(&density.ps)
        .map(|(x, p)| x.powi(k as i32) * p)
        .collect();
    let atom = if k == 0 { density.atom_at_zero } else { 0.0 };
    trapezoid(&density.xs, &ys) + atom
}

/// Grid settings for [`compute_density`]; unset fields are chosen
/// automatically.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityOptions {
    pub points: usize,
    pub range: Option<(f64, f64)>,
    /// `ε₂`; defaults to `1e-3` times the grid span.
    pub epsilon: Option<f64>,
}

impl Default for DensityOptions {
    fn default() -> Self {
        Self {
            points: DEFAULT_POINTS,
            range: None,
            epsilon: None,
        }
    }
}

/// A density with the solver diagnostics gathered while computing it.
#[derive(Clone, Debug)]
pub struct DensityReport {
    pub density: SpectralDensity,
    pub mass: f64,
    /// Largest eigenvalue of `Im 𝒢` over all solved points.
    pub max_positivity: f64,
    pub max_residual: f64,
    pub solved_points: usize,
    pub warnings: Vec<String>,
}

impl DensityReport {
    /// Mass and nonnegativity invariants both hold.
    pub fn passes(&self) -> bool {
        self.warnings.is_empty()
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// `G(z)` with the zero atom removed, so that only the continuous part is
/// inverted.
fn continuous_part(p: &LawPoint, atom: f64) -> Complex64 {
    p.g - atom / p.z
}

/// Density of `law` on the given grid with offsets `ε₂ = epsilon` and `2ε₂`.
pub fn density_on_grid(law: &Law, xs: &[f64], epsilon: f64, config: &SolverConfig) -> Result<DensityReport> {
    check_grid(xs)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::GridError(format!("epsilon must be positive, got {epsilon}")));
    }
    let near: Vec<Complex64> = xs.iter().map(|x| Complex64::new(*x, epsilon)).collect();
    let far: Vec<Complex64> = xs.iter().map(|x| Complex64::new(*x, 2.0 * epsilon)).collect();
    let g2 = law.cauchy_path(&near, config)?;
    let g1 = law.cauchy_path(&far, config)?;
    let atom = law.zero_atom();
    let values: Vec<(f64, Complex64, Complex64)> = xs
        .iter()
        .zip(g1.iter().zip(&g2))
        .map(|(x, (a, b))| (*x, continuous_part(a, atom), continuous_part(b, atom)))
        .collect();
    let mut density = stieltjes_invert(&values, epsilon)?;
    density.atom_at_zero = atom;
    let all = g1.iter().chain(&g2);
    let max_positivity = all
        .clone()
        .map(|p| p.solution.positivity)
        .fold(f64::NEG_INFINITY, f64::max);
    let max_residual = all.map(|p| p.solution.residual).fold(0.0, f64::max);
    let mass = density.mass();
    let mut warnings = Vec::new();
    if (mass - 1.0).abs() > MASS_TOL {
        warnings.push(format!(
            "total mass {mass:.6} deviates from 1 by more than {MASS_TOL:e}"
        ));
    }
    if density.min_raw < -NEGATIVE_EXCURSION_TOL {
        warnings.push(format!("density dipped to {:.3e} before clipping", density.min_raw));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(DensityReport {
        density,
        mass,
        max_positivity,
        max_residual,
        solved_points: 2 * xs.len(),
        warnings,
    })
}

fn point_density(law: &Law, x: f64, epsilon: f64, config: &SolverConfig) -> Result<f64> {
    let atom = law.zero_atom();
    let g2 = law.cauchy(Complex64::new(x, epsilon), config, None)?;
    let g1 = law.cauchy(Complex64::new(x, 2.0 * epsilon), config, None)?;
    let g2 = continuous_part(&g2, atom);
    let g1 = continuous_part(&g1, atom);
    Ok((-(2.0 * g2 - g1).im / std::f64::consts::PI).max(0.0))
}

/// An interval around the support: the spectral bound padded by 5%,
/// widened by 20% while the density at an endpoint exceeds
/// [`BOUNDARY_TOL`]. Gram laws live on `[0, ∞)`, so only their upper end
/// moves.
pub fn auto_support(law: &Law, config: &SolverConfig) -> Result<(f64, f64)> {
    let (lo, hi) = law.support_bound();
    let span = hi - lo;
    if !(span > 0.0) {
        return Err(Error::BadParameter(
            "the covariance map vanishes; the law is a point mass".into(),
        ));
    }
    let (mut lo, mut hi) = (lo - 0.05 * span, hi + 0.05 * span);
    let fixed_lower = law.is_gram();
    for _ in 0..MAX_EXPANSIONS {
        let eps = DEFAULT_RELATIVE_EPSILON * (hi - lo);
        let mut edge = point_density(law, hi, eps, config)?;
        if !fixed_lower {
            edge = edge.max(point_density(law, lo, eps, config)?);
        }
        if edge < BOUNDARY_TOL {
            break;
        }
        let pad = 0.2 * (hi - lo);
        if !fixed_lower {
            lo -= pad;
        }
        hi += pad;
    }
    Ok((lo, hi))
}

/// Density of `law` on a uniform grid with the defaults of
/// [`DensityOptions`].
pub fn compute_density(law: &Law, options: &DensityOptions, config: &SolverConfig) -> Result<DensityReport> {
    if options.points < 2 {
        return Err(Error::GridError("a grid needs at least two points".into()));
    }
    let (lo, hi) = match options.range {
        Some(r) => r,
        None => auto_support(law, config)?,
    };
    if !(hi > lo) {
        return Err(Error::GridError(format!("empty grid range [{lo}, {hi}]")));
    }
    let epsilon = options.epsilon.unwrap_or(DEFAULT_RELATIVE_EPSILON * (hi - lo));
    density_on_grid(law, &linspace(lo, hi, options.points), epsilon, config)
}
