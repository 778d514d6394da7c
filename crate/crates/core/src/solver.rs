//! Solvers for the matrix-valued Cauchy transform.
//!
//! The central equation is `z 𝒢 = I + η(𝒢) 𝒢` for `z` in the upper half
//! plane. Among its solutions exactly one has `Im 𝒢 ≼ 0`; it is the limit of
//! the iteration `𝒢 ↦ (z − η(𝒢))⁻¹` from any start with negative imaginary
//! part. Close to the real axis the iteration contracts slowly, so points
//! with small `Im z` are reached by continuation in `Im z` with Newton steps.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{validate_covariance, CovarianceSpec, EtaMap, ValidatedCovariance};
use crate::error::{Error, Result};
use crate::linalg::{identity, inverse, max_imag_eigenvalue, project_negative_imag, weighted_trace, CMat, I};

/// Largest admissible eigenvalue of `Im 𝒢` at an accepted solution.
pub const POSITIVITY_TOL: f64 = 1e-8;
/// Points closer to the real axis than this are rejected.
pub const MIN_IMAG: f64 = 1e-8;
/// Residual at which the fixed-point phase hands over to Newton.
pub const NEWTON_SWITCH: f64 = 1e-6;
const MIN_DAMPING: f64 = 1.0 / 64.0;
const DAMPING_RESET: usize = 10;
const NEWTON_MAX_STEPS: usize = 60;
const SEGMENT: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Frobenius norm of the residual accepted as converged.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial mixing factor of the fixed-point iteration.
    pub damping: f64,
    /// Refine with Newton steps once the residual is below `1e-6`.
    pub newton: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
            damping: 1.0,
            newton: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// The solution at one point `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct CauchySolution {
    pub z: Complex64,
    pub g: CMat,
    /// Frobenius norm of the residual of the defining equation.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest eigenvalue of `Im 𝒢`.
    pub positivity: f64,
}

impl CauchySolution {
    /// Weighted trace `Σ w_i [𝒢]_ii`.
    pub fn trace(&self, weights: &[f64]) -> Complex64 {
        weighted_trace(weights, &self.g)
    }
}

/// One fixed-point problem `R_z(𝒢) = 0` with its iteration map and Newton
/// linearization.
pub(crate) trait Equation: Sync {
    fn dim(&self) -> usize;
    /// The iteration map `F_z`.
    fn map(&self, z: Complex64, g: &CMat) -> Option<CMat>;
    fn residual(&self, z: Complex64, g: &CMat) -> Option<CMat>;
    /// Dense matrix of `dR_z` acting on column-major vectorized matrices.
    fn jacobian(&self, z: Complex64, g: &CMat) -> Option<CMat>;
    /// Height above the real axis where the plain iteration is fast.
    fn ladder_top(&self) -> f64;
}

/// `z 𝒢 = I + η(𝒢) 𝒢`.
pub(crate) struct Semicircle<'a> {
    eta: &'a EtaMap,
    top: f64,
}

impl<'a> Semicircle<'a> {
    pub(crate) fn new(eta: &'a EtaMap) -> Self {
        Self {
            eta,
            top: 2.0 * eta.spectral_radius_bound().max(1e-3),
        }
    }
}

impl Equation for Semicircle<'_> {
    fn dim(&self) -> usize {
        self.eta.dim_in()
    }

    fn map(&self, z: Complex64, g: &CMat) -> Option<CMat> {
        let d = self.dim();
        inverse(&(identity(d) * z - self.eta.apply_unchecked(g)))
    }

    fn residual(&self, z: Complex64, g: &CMat) -> Option<CMat> {
        let d = self.dim();
        Some(g * z - identity(d) - self.eta.apply_unchecked(g) * g)
    }

    fn jacobian(&self, z: Complex64, g: &CMat) -> Option<CMat> {
        // J(Δ) = zΔ − η(Δ)𝒢 − η(𝒢)Δ
        let d = self.dim();
        let eg = self.eta.apply_unchecked(g);
        let mut jac = CMat::zeros(d * d, d * d);
        for l in 0..d {
            for k in 0..d {
                let col = k + l * d;
                let unit = self.eta.apply_unit(k, l) * g;
                for j in 0..d {
                    for i in 0..d {
                        jac[(i + j * d, col)] = -unit[(i, j)];
                    }
                }
                jac[(col, col)] += z;
                for i in 0..d {
                    jac[(i + l * d, col)] -= eg[(i, k)];
                }
            }
        }
        Some(jac)
    }

    fn ladder_top(&self) -> f64 {
        self.top
    }
}

/// `z 𝒢₁ = I + outer((I − inner(𝒢₁))⁻¹) 𝒢₁`, the equation left after
/// eliminating the second block of a two-block system.
pub(crate) struct Eliminated<'a> {
    outer: &'a EtaMap,
    inner: &'a EtaMap,
    top: f64,
}

impl<'a> Eliminated<'a> {
    pub(crate) fn new(outer: &'a EtaMap, inner: &'a EtaMap) -> Result<Self> {
        let joint = EtaMap::two_block(outer, inner)?;
        let r = joint.spectral_radius_bound();
        Ok(Self {
            outer,
            inner,
            top: 2.0 * (r * r).max(1e-3),
        })
    }

    fn inner_resolvent(&self, g: &CMat) -> Option<CMat> {
        let q = self.inner.dim_out();
        inverse(&(identity(q) - self.inner.apply_unchecked(g)))
    }
}

impl Equation for Eliminated<'_> {
    fn dim(&self) -> usize {
        self.outer.dim_out()
    }

    fn map(&self, z: Complex64, g: &CMat) -> Option<CMat> {
        let m = self.inner_resolvent(g)?;
        inverse(&(identity(self.dim()) * z - self.outer.apply_unchecked(&m)))
    }

    fn residual(&self, z: Complex64, g: &CMat) -> Option<CMat> {
        let m = self.inner_resolvent(g)?;
        Some(g * z - identity(self.dim()) - self.outer.apply_unchecked(&m) * g)
    }

    fn jacobian(&self, z: Complex64, g: &CMat) -> Option<CMat> {
        // J(Δ) = zΔ − outer(M inner(Δ) M) 𝒢₁ − outer(M) Δ
        let p = self.dim();
        let m = self.inner_resolvent(g)?;
        let a = self.outer.apply_unchecked(&m);
        let mut jac = CMat::zeros(p * p, p * p);
        for l in 0..p {
            for k in 0..p {
                let col = k + l * p;
                let dm = &m * self.inner.apply_unit(k, l) * &m;
                let term = self.outer.apply_unchecked(&dm) * g;
                for j in 0..p {
                    for i in 0..p {
                        jac[(i + j * p, col)] = -term[(i, j)];
                    }
                }
                jac[(col, col)] += z;
                for i in 0..p {
                    jac[(i + l * p, col)] -= a[(i, k)];
                }
            }
        }
        Some(jac)
    }

    fn ladder_top(&self) -> f64 {
        self.top
    }
}

#[derive(Clone, Debug)]
struct Attempt {
    g: CMat,
    residual: f64,
    iterations: usize,
    converged: bool,
}

enum Failure {
    Singular,
    SingularJacobian,
    Stalled(Attempt),
}

fn residual_norm<E: Equation>(eq: &E, z: Complex64, g: &CMat) -> f64 {
    match eq.residual(z, g) {
        Some(r) if r.iter().all(|v| v.is_finite()) => r.norm(),
        _ => f64::INFINITY,
    }
}

/// Damped iteration of `F_z` until the residual drops below `target`.
fn fixed_point<E: Equation>(
    eq: &E,
    z: Complex64,
    g0: CMat,
    config: &SolverConfig,
    target: f64,
) -> std::result::Result<Attempt, Failure> {
    let mut g = g0;
    let mut res = residual_norm(eq, z, &g);
    let mut best = (g.clone(), res);
    let mut theta = config.damping;
    let mut streak = 0;
    for it in 0..config.max_iter {
        if res <= target {
            return Ok(Attempt {
                g,
                residual: res,
                iterations: it,
                converged: true,
            });
        }
        let f = eq.map(z, &g).ok_or(Failure::Singular)?;
        let cand = if theta < 1.0 {
            &g * Complex64::from(1.0 - theta) + f * Complex64::from(theta)
        } else {
            f
        };
        let cand_res = residual_norm(eq, z, &cand);
        if cand_res > res {
            theta = (theta * 0.5).max(MIN_DAMPING);
            streak = 0;
        } else {
            streak += 1;
            if streak >= DAMPING_RESET {
                theta = config.damping;
                streak = 0;
            }
        }
        g = cand;
        res = cand_res;
        if res < best.1 {
            best = (g.clone(), res);
        }
    }
    if res <= target {
        return Ok(Attempt {
            g,
            residual: res,
            iterations: config.max_iter,
            converged: true,
        });
    }
    Err(Failure::Stalled(Attempt {
        g: best.0,
        residual: best.1,
        iterations: config.max_iter,
        converged: false,
    }))
}

fn vectorize(m: &CMat) -> nalgebra::DVector<Complex64> {
    nalgebra::DVector::from_column_slice(m.as_slice())
}

/// Newton's method on `R_z` with backtracking on the residual norm.
fn newton<E: Equation>(eq: &E, z: Complex64, g0: CMat, config: &SolverConfig) -> std::result::Result<Attempt, Failure> {
    let d = eq.dim();
    let mut g = g0;
    let mut res = residual_norm(eq, z, &g);
    let max_steps = config.max_iter.min(NEWTON_MAX_STEPS);
    for step in 0..max_steps {
        if res <= config.tol {
            return Ok(Attempt {
                g,
                residual: res,
                iterations: step,
                converged: true,
            });
        }
        if !res.is_finite() {
            return Err(Failure::Singular);
        }
        let r = eq.residual(z, &g).ok_or(Failure::Singular)?;
        let jac = eq.jacobian(z, &g).ok_or(Failure::Singular)?;
        let delta = jac
            .lu()
            .solve(&(-vectorize(&r)))
            .filter(|v| v.iter().all(|x| x.is_finite()))
            .ok_or(Failure::SingularJacobian)?;
        let delta = CMat::from_column_slice(d, d, delta.as_slice());
        let mut t = 1.0;
        loop {
            let cand = &g + &delta * Complex64::from(t);
            let cand_res = residual_norm(eq, z, &cand);
            if cand_res < res {
                g = cand;
                res = cand_res;
                break;
            }
            t *= 0.5;
            if t < 1e-3 {
                return Err(Failure::Stalled(Attempt {
                    g,
                    residual: res,
                    iterations: step + 1,
                    converged: false,
                }));
            }
        }
    }
    if res <= config.tol {
        return Ok(Attempt {
            g,
            residual: res,
            iterations: max_steps,
            converged: true,
        });
    }
    Err(Failure::Stalled(Attempt {
        g,
        residual: res,
        iterations: max_steps,
        converged: false,
    }))
}

fn to_solution(z: Complex64, a: Attempt) -> CauchySolution {
    let positivity = max_imag_eigenvalue(&a.g);
    CauchySolution {
        z,
        g: a.g,
        residual: a.residual,
        iterations: a.iterations,
        converged: a.converged,
        positivity,
    }
}

fn accepted(a: &Attempt) -> bool {
    a.converged && max_imag_eigenvalue(&a.g) <= POSITIVITY_TOL
}

/// Tracks the most useful failure across the strategies tried at one point.
#[derive(Default)]
struct Outcome {
    best: Option<Attempt>,
    singular: bool,
    singular_jacobian: bool,
    iterations: usize,
}

impl Outcome {
    fn record(&mut self, f: Failure) {
        match f {
            Failure::Singular => self.singular = true,
            Failure::SingularJacobian => self.singular_jacobian = true,
            Failure::Stalled(a) => self.offer(a),
        }
    }

    fn offer(&mut self, a: Attempt) {
        self.iterations += a.iterations;
        if self.best.as_ref().is_none_or(|b| a.residual < b.residual) {
            self.best = Some(a);
        }
    }

    fn into_error(self, z: Complex64) -> Error {
        match self.best {
            Some(a) if a.converged => Error::PositivityViolation {
                z,
                max_eig: max_imag_eigenvalue(&a.g),
            },
            Some(mut a) => {
                a.iterations = self.iterations;
                Error::NoConvergence {
                    best: Box::new(to_solution(z, a)),
                    index: None,
                }
            }
            None if self.singular_jacobian && !self.singular => Error::SingularJacobian { z },
            None => Error::SingularResolvent { z },
        }
    }
}

/// Fixed-point phase followed by Newton refinement.
fn direct<E: Equation>(eq: &E, z: Complex64, g0: CMat, config: &SolverConfig) -> std::result::Result<Attempt, Failure> {
    if !config.newton {
        return fixed_point(eq, z, g0, config, config.tol);
    }
    let switch = NEWTON_SWITCH.max(config.tol);
    let pre = fixed_point(eq, z, g0, config, switch)?;
    match newton(eq, z, pre.g.clone(), config) {
        Ok(mut a) => {
            a.iterations += pre.iterations;
            Ok(a)
        }
        Err(_) => {
            let mut a = fixed_point(eq, z, pre.g, config, config.tol)?;
            a.iterations += pre.iterations;
            Ok(a)
        }
    }
}

/// Newton from `g0` when enabled, else (or on failure) the direct route.
fn continue_from<E: Equation>(
    eq: &E,
    z: Complex64,
    g0: CMat,
    config: &SolverConfig,
    out: &mut Outcome,
) -> Option<Attempt> {
    if config.newton {
        match newton(eq, z, g0.clone(), config) {
            Ok(a) if accepted(&a) => return Some(a),
            Ok(a) => out.offer(a),
            Err(f) => out.record(f),
        }
    }
    match direct(eq, z, g0, config) {
        Ok(a) if accepted(&a) => Some(a),
        Ok(a) => {
            out.offer(a);
            None
        }
        Err(f) => {
            out.record(f);
            None
        }
    }
}

/// Continuation in `Im z`: solve high above the axis, then halve the
/// height down to the target point, each rung started from the last.
fn ladder<E: Equation>(eq: &E, z: Complex64, config: &SolverConfig, out: &mut Outcome) -> Option<Attempt> {
    let mut heights = vec![z.im];
    while *heights.last().expect("nonempty") < eq.ladder_top() {
        let next = heights.last().expect("nonempty") * 2.0;
        heights.push(next);
    }
    let top = Complex64::new(z.re, *heights.last().expect("nonempty"));
    let start = identity(eq.dim()) * (-I);
    let mut current = match direct(eq, top, start, config) {
        Ok(a) if accepted(&a) => a,
        Ok(a) => {
            out.offer(a);
            return None;
        }
        Err(f) => {
            out.record(f);
            return None;
        }
    };
    let mut iterations = current.iterations;
    for &y in heights.iter().rev().skip(1) {
        let zk = Complex64::new(z.re, y);
        current = continue_from(eq, zk, current.g, config, out)?;
        iterations += current.iterations;
    }
    current.iterations = iterations;
    Some(current)
}

/// Solves one point with every strategy available, in order of cost.
pub(crate) fn solve_equation<E: Equation>(
    eq: &E,
    z: Complex64,
    config: &SolverConfig,
    warm_start: Option<&CMat>,
) -> Result<CauchySolution> {
    let mut out = Outcome::default();
    let start = identity(eq.dim()) * (-I);
    let far = z.im >= eq.ladder_top() * 0.25;
    if let Some(w) = warm_start {
        let g0 = project_negative_imag(w, 0.0);
        if let Some(a) = continue_from(eq, z, g0, config, &mut out) {
            return Ok(to_solution(z, a));
        }
    } else if far {
        match direct(eq, z, start.clone(), config) {
            Ok(a) if accepted(&a) => return Ok(to_solution(z, a)),
            Ok(a) => out.offer(a),
            Err(f) => out.record(f),
        }
    }
    if let Some(a) = ladder(eq, z, config, &mut out) {
        return Ok(to_solution(z, a));
    }
    if !far || warm_start.is_some() {
        match direct(eq, z, start, config) {
            Ok(a) if accepted(&a) => return Ok(to_solution(z, a)),
            Ok(a) => out.offer(a),
            Err(f) => out.record(f),
        }
    }
    Err(out.into_error(z))
}

fn check_point(z: Complex64) -> Result<()> {
    if !z.is_finite() {
        return Err(Error::InvalidPoint {
            z,
            reason: "not finite".into(),
        });
    }
    if z.im < MIN_IMAG {
        return Err(Error::InvalidPoint {
            z,
            reason: format!("Im z must be at least {MIN_IMAG:e}"),
        });
    }
    Ok(())
}

fn check_square(eta: &EtaMap) -> Result<()> {
    if !eta.is_square() {
        return Err(Error::DimensionMismatch {
            expected: (eta.dim_in(), eta.dim_in()),
            found: (eta.dim_out(), eta.dim_out()),
        });
    }
    Ok(())
}

fn check_warm(dim: usize, warm: Option<&CMat>) -> Result<()> {
    match warm {
        Some(w) if w.shape() != (dim, dim) => Err(Error::DimensionMismatch {
            expected: (dim, dim),
            found: w.shape(),
        }),
        _ => Ok(()),
    }
}

/// Solves `z 𝒢 = I + η(𝒢) 𝒢` at one point, starting from `warm_start`
/// (projected to negative imaginary part) or from `−iI`.
pub fn solve_fixed_point(
    eta: &EtaMap,
    z: Complex64,
    config: &SolverConfig,
    warm_start: Option<&CMat>,
) -> Result<CauchySolution> {
    config.validate()?;
    check_square(eta)?;
    check_point(z)?;
    check_warm(eta.dim_in(), warm_start)?;
    solve_equation(&Semicircle::new(eta), z, config, warm_start)
}

/// Newton iteration from `g0` with the Jacobian assembled as a dense
/// `d² × d²` system.
pub fn newton_refine(eta: &EtaMap, z: Complex64, g0: &CMat, config: &SolverConfig) -> Result<CauchySolution> {
    config.validate()?;
    check_square(eta)?;
    check_point(z)?;
    check_warm(eta.dim_in(), Some(g0))?;
    match newton(&Semicircle::new(eta), z, g0.clone(), config) {
        Ok(a) => Ok(to_solution(z, a)),
        Err(Failure::Stalled(a)) => Err(Error::NoConvergence {
            best: Box::new(to_solution(z, a)),
            index: None,
        }),
        Err(Failure::SingularJacobian) => Err(Error::SingularJacobian { z }),
        Err(Failure::Singular) => Err(Error::SingularResolvent { z }),
    }
}

fn with_index(e: Error, i: usize) -> Error {
    match e {
        Error::NoConvergence { best, .. } => Error::NoConvergence { best, index: Some(i) },
        other => other,
    }
}

/// Solves a sequence of points, warm-starting each from its predecessor.
/// The sequence is cut into fixed-size segments solved in parallel.
pub(crate) fn sweep<T, F>(n: usize, solve: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, Option<&T>) -> Result<T> + Sync,
{
    let segments: Vec<std::ops::Range<usize>> = (0..n).step_by(SEGMENT).map(|s| s..(s + SEGMENT).min(n)).collect();
    let parts: Vec<Result<Vec<T>>> = segments
        .into_par_iter()
        .map(|range| {
            let mut out: Vec<T> = Vec::with_capacity(range.len());
            for i in range {
                let next = solve(i, out.last()).map_err(|e| with_index(e, i))?;
                out.push(next);
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(n);
    for part in parts {
        all.extend(part?);
    }
    Ok(all)
}

/// Solves at `z = x + iε` for every `x`, warm-starting from the neighbor.
pub fn solve_grid(eta: &EtaMap, xs: &[f64], epsilon: f64, config: &SolverConfig) -> Result<Vec<CauchySolution>> {
    config.validate()?;
    check_square(eta)?;
    if !(epsilon >= MIN_IMAG && epsilon.is_finite()) {
        return Err(Error::GridError(format!(
            "epsilon must be at least {MIN_IMAG:e}, got {epsilon}"
        )));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::GridError("grid contains non-finite points".into()));
    }
    let eq = Semicircle::new(eta);
    sweep(xs.len(), |i, prev: Option<&CauchySolution>| {
        solve_equation(&eq, Complex64::new(xs[i], epsilon), config, prev.map(|s| &s.g))
    })
}

/// Solution of the `HH*` model at one point.
#[derive(Clone, Debug)]
pub struct HhStarSolution {
    /// `a × a` block, the Cauchy transform of `HH*` with values in `M_a`.
    pub g1: CMat,
    /// `b × b` block, the same for `H*H`.
    pub g2: CMat,
    /// `tr_a(𝒢₁)`, the scalar Cauchy transform of `HH*`.
    pub g: Complex64,
    /// `ℋ(z) = diag(𝒢₁, 𝒢₂)`.
    pub h: CMat,
    /// Residuals of `z𝒢₁ = I + zη₁(𝒢₂)𝒢₁` and `z𝒢₂ = I + zη₂(𝒢₁)𝒢₂`.
    pub residuals: (f64, f64),
    pub iterations: usize,
    /// Largest eigenvalue of `Im ℋ`.
    pub positivity: f64,
}

fn hh_maps(spec: &CovarianceSpec) -> Result<(ValidatedCovariance, EtaMap, EtaMap)> {
    let validated = validate_covariance(spec.clone())?;
    let (eta1, eta2) = validated.eta_pair()?;
    Ok((validated, eta1, eta2))
}

fn split_residuals(z: Complex64, g1: &CMat, g2: &CMat, eta1: &EtaMap, eta2: &EtaMap) -> (f64, f64) {
    let (a, b) = (g1.nrows(), g2.nrows());
    let r1 = g1 * z - identity(a) - eta1.apply_unchecked(g2) * z * g1;
    let r2 = g2 * z - identity(b) - eta2.apply_unchecked(g1) * z * g2;
    (r1.norm(), r2.norm())
}

fn assemble_hh(z: Complex64, g1: CMat, g2: CMat, eta1: &EtaMap, eta2: &EtaMap, iterations: usize) -> HhStarSolution {
    let (a, b) = (g1.nrows(), g2.nrows());
    let mut h = CMat::zeros(a + b, a + b);
    h.view_mut((0, 0), (a, a)).copy_from(&g1);
    h.view_mut((a, a), (b, b)).copy_from(&g2);
    let residuals = split_residuals(z, &g1, &g2, eta1, eta2);
    let g = crate::linalg::normalized_trace(&g1);
    let positivity = max_imag_eigenvalue(&h);
    HhStarSolution {
        g1,
        g2,
        g,
        h,
        residuals,
        iterations,
        positivity,
    }
}

/// Solves `z ℋ = I + z η(ℋ) ℋ` for the hermitized covariance and splits
/// `ℋ` into its diagonal blocks.
///
/// Writing `ℋ(z) = 𝒢(w)/w` with `w = √z` turns this into the semicircle
/// equation at `w`, so the same solver core is reused.
pub fn solve_hh_star(spec: &CovarianceSpec, z: Complex64, config: &SolverConfig) -> Result<HhStarSolution> {
    config.validate()?;
    check_point(z)?;
    let (validated, eta1, eta2) = hh_maps(spec)?;
    let eta = validated.eta_map();
    let w = z.sqrt();
    let sol = solve_equation(&Semicircle::new(&eta), w, config, None)?;
    let a = eta1.dim_out();
    let b = eta2.dim_out();
    let h = &sol.g / w;
    let g1 = h.view((0, 0), (a, a)).into_owned();
    let g2 = h.view((a, a), (b, b)).into_owned();
    Ok(assemble_hh(z, g1, g2, &eta1, &eta2, sol.iterations))
}

/// Solves the eliminated form `z𝒢₁ = I + η₁((I − η₂(𝒢₁))⁻¹)𝒢₁` directly.
pub fn solve_hh_star_direct(spec: &CovarianceSpec, z: Complex64, config: &SolverConfig) -> Result<HhStarSolution> {
    config.validate()?;
    check_point(z)?;
    let (_, eta1, eta2) = hh_maps(spec)?;
    let eq = Eliminated::new(&eta1, &eta2)?;
    let sol = solve_equation(&eq, z, config, None)?;
    let b = eta2.dim_out();
    let m = inverse(&(identity(b) - eta2.apply_unchecked(&sol.g))).ok_or(Error::SingularResolvent { z })?;
    let g2 = m / z;
    Ok(assemble_hh(z, sol.g, g2, &eta1, &eta2, sol.iterations))
}

/// Solves the eliminated two-block equation at one point.
pub(crate) fn solve_eliminated(
    outer: &EtaMap,
    inner: &EtaMap,
    z: Complex64,
    config: &SolverConfig,
    warm_start: Option<&CMat>,
) -> Result<CauchySolution> {
    config.validate()?;
    check_point(z)?;
    if outer.dim_in() != inner.dim_out() || outer.dim_out() != inner.dim_in() {
        return Err(Error::DimensionMismatch {
            expected: (outer.dim_out(), outer.dim_in()),
            found: (inner.dim_in(), inner.dim_out()),
        });
    }
    check_warm(outer.dim_out(), warm_start)?;
    solve_equation(&Eliminated::new(outer, inner)?, z, config, warm_start)
}

const CONTOUR_NODES: usize = 64;

/// Moments `m_k = Σ w_i [M_k]_ii` of the law with covariance `η`, for
/// `k = 0..=max_order`, from `𝒢` on the circle `|z| = radius`.
///
/// `𝒢(z) = Σ M_k z^{−k−1}` outside the support, so each `M_k` is a contour
/// integral; the trapezoid rule on a circle converges geometrically.
pub fn moment_check(
    eta: &EtaMap,
    weights: &[f64],
    radius: f64,
    max_order: usize,
    config: &SolverConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    check_square(eta)?;
    if weights.len() != eta.dim_in() {
        return Err(Error::DimensionMismatch {
            expected: (eta.dim_in(), 1),
            found: (weights.len(), 1),
        });
    }
    let bound = eta.spectral_radius_bound();
    if !(radius > 1.2 * bound) {
        return Err(Error::IllConditioned(format!(
            "radius {radius} must exceed 1.2 times the spectral bound {bound:.6}"
        )));
    }
    let eq = Semicircle::new(eta);
    let thetas: Vec<f64> = (0..CONTOUR_NODES)
        .map(|j| std::f64::consts::PI * (j as f64 + 0.5) / CONTOUR_NODES as f64)
        .collect();
    let traces = sweep(CONTOUR_NODES, |j, prev: Option<&CauchySolution>| {
        solve_equation(
            &eq,
            Complex64::from_polar(radius, thetas[j]),
            config,
            prev.map(|s| &s.g),
        )
    })?
    .iter()
    .map(|s| s.trace(weights))
    .collect::<Vec<_>>();
    let nodes = 2.0 * CONTOUR_NODES as f64;
    Ok((0..=max_order)
        .map(|k| {
            let p = (k + 1) as f64;
            let sum: Complex64 = thetas
                .iter()
                .zip(&traces)
                .map(|(t, g)| {
                    // the lower half circle contributes the conjugate
                    let upper = Complex64::from_polar(1.0, p * t) * g;
                    upper + upper.conj()
                })
                .sum();
            radius.powf(p) * sum.re / nodes
        })
        .collect())
}

/// Which Gram matrix of a two-block model is studied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramSide {
    /// `HH*`, traced over the first block.
    Upper,
    /// `H*H`, traced over the second block.
    Lower,
}

/// A scalar spectral law ready for Stieltjes inversion.
#[derive(Clone, Debug)]
pub enum Law {
    /// Selfadjoint operator-valued semicircular element traced with `weights`.
    SelfAdjoint { eta: EtaMap, weights: Vec<f64> },
    /// `HH*` or `H*H` of a two-block hermitization `η` with first block of
    /// size `a`; `atoms` are the zero atoms of the upper and lower side.
    Gram {
        eta: EtaMap,
        a: usize,
        side: GramSide,
        atoms: (f64, f64),
    },
}

/// Scalar Cauchy transform at one point together with the matrix solution
/// it was read from.
#[derive(Clone, Debug)]
pub struct LawPoint {
    pub z: Complex64,
    pub g: Complex64,
    pub solution: CauchySolution,
}

impl Law {
    /// The law of the selfadjoint matrix for selfadjoint and rectangular
    /// covariances, or of `HH*` for `hh_star` covariances.
    pub fn from_covariance(cov: &ValidatedCovariance) -> Law {
        match cov.spec() {
            CovarianceSpec::HhStar { a, b, .. } => {
                let (af, bf) = (*a as f64, *b as f64);
                Law::Gram {
                    eta: cov.eta_map(),
                    a: *a,
                    side: GramSide::Upper,
                    atoms: (((af - bf) / af).max(0.0), ((bf - af) / bf).max(0.0)),
                }
            }
            _ => Law::SelfAdjoint {
                eta: cov.eta_map(),
                weights: cov.trace_weights(),
            },
        }
    }

    /// Switches a Gram law to the other side; no effect on selfadjoint laws.
    pub fn with_side(self, side: GramSide) -> Law {
        match self {
            Law::Gram { eta, a, atoms, .. } => Law::Gram { eta, a, side, atoms },
            other => other,
        }
    }

    pub fn eta(&self) -> &EtaMap {
        match self {
            Law::SelfAdjoint { eta, .. } | Law::Gram { eta, .. } => eta,
        }
    }

    pub fn is_gram(&self) -> bool {
        matches!(self, Law::Gram { .. })
    }

    /// Weights of the trace applied to the matrix solution.
    pub fn weights(&self) -> Vec<f64> {
        match self {
            Law::SelfAdjoint { weights, .. } => weights.clone(),
            Law::Gram { eta, a, side, .. } => {
                let d = eta.dim_in();
                let b = d - a;
                (0..d)
                    .map(|i| match side {
                        GramSide::Upper if i < *a => 1.0 / *a as f64,
                        GramSide::Lower if i >= *a => 1.0 / b as f64,
                        _ => 0.0,
                    })
                    .collect()
            }
        }
    }

    /// Spectral radius bound `r` of the (hermitized) selfadjoint element.
    pub fn radius(&self) -> f64 {
        self.eta().spectral_radius_bound()
    }

    /// Point mass at zero known from the block dimensions.
    pub fn zero_atom(&self) -> f64 {
        match self {
            Law::SelfAdjoint { .. } => 0.0,
            Law::Gram { side, atoms, .. } => match side {
                GramSide::Upper => atoms.0,
                GramSide::Lower => atoms.1,
            },
        }
    }

    /// An interval guaranteed to contain the support.
    pub fn support_bound(&self) -> (f64, f64) {
        let r = self.radius();
        match self {
            Law::SelfAdjoint { .. } => (-r, r),
            Law::Gram { .. } => (0.0, r * r),
        }
    }

    fn point_from(&self, z: Complex64, solution: CauchySolution) -> LawPoint {
        let tr = solution.trace(&self.weights());
        let g = match self {
            Law::SelfAdjoint { .. } => tr,
            Law::Gram { .. } => tr / z.sqrt(),
        };
        LawPoint { z, g, solution }
    }

    /// Scalar Cauchy transform at `z`. For Gram laws the matrix solution is
    /// `𝒢(√z)` of the hermitized element.
    pub fn cauchy(&self, z: Complex64, config: &SolverConfig, warm_start: Option<&CMat>) -> Result<LawPoint> {
        config.validate()?;
        check_point(z)?;
        check_warm(self.eta().dim_in(), warm_start)?;
        let eq = Semicircle::new(self.eta());
        let w = match self {
            Law::SelfAdjoint { .. } => z,
            Law::Gram { .. } => z.sqrt(),
        };
        let sol = solve_equation(&eq, w, config, warm_start)?;
        Ok(self.point_from(z, sol))
    }

    /// Scalar Cauchy transforms along a path of points, warm-starting each
    /// from its neighbor.
    pub fn cauchy_path(&self, zs: &[Complex64], config: &SolverConfig) -> Result<Vec<LawPoint>> {
        config.validate()?;
        for z in zs {
            check_point(*z)?;
        }
        let eq = Semicircle::new(self.eta());
        let gram = self.is_gram();
        sweep(zs.len(), |i, prev: Option<&LawPoint>| {
            let z = zs[i];
            let w = if gram { z.sqrt() } else { z };
            let sol = solve_equation(&eq, w, config, prev.map(|p| &p.solution.g))?;
            Ok(self.point_from(z, sol))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{isi_covariance, SigmaEntry, TauEntry};
    use crate::linalg::c;
    use approx::assert_abs_diff_eq;

    fn semicircle() -> EtaMap {
        validate_covariance(CovarianceSpec::SelfAdjoint {
            d: 1,
            sigma: vec![SigmaEntry::real(0, 0, 0, 0, 1.0)],
        })
        .unwrap()
        .eta_map()
    }

    fn closed_form(z: Complex64) -> Complex64 {
        // branch with G(z) ~ 1/z at infinity
        let s = (z - 2.0).sqrt() * (z + 2.0).sqrt();
        (z - s) / 2.0
    }

    fn mp_spec() -> CovarianceSpec {
        CovarianceSpec::HhStar {
            a: 1,
            b: 1,
            tau: vec![TauEntry::new(0, 0, 0, 0, 2.0)],
        }
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        for bad in [
            SolverConfig {
                tol: 0.0,
                ..Default::default()
            },
            SolverConfig {
                damping: 0.0,
                ..Default::default()
            },
            SolverConfig {
                damping: 1.5,
                ..Default::default()
            },
            SolverConfig {
                max_iter: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn semicircle_at_i() {
        let sol = solve_fixed_point(&semicircle(), c(0.0, 1.0), &SolverConfig::default(), None).unwrap();
        assert!(sol.converged);
        assert!(sol.residual <= 1e-10);
        assert_abs_diff_eq!(
            (sol.g[(0, 0)] - c(0.0, (1.0 - 5f64.sqrt()) / 2.0)).norm(),
            0.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn semicircle_outside_support_is_real() {
        let sol = solve_fixed_point(&semicircle(), c(3.0, 1e-8), &SolverConfig::default(), None).unwrap();
        let g = sol.g[(0, 0)];
        assert!(g.im.abs() < 1e-8);
        assert_abs_diff_eq!(g.re, (3.0 - 5f64.sqrt()) / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn semicircle_matches_closed_form_near_axis() {
        for x in [-1.9, -1.0, 0.0, 0.5, 1.99, 2.01] {
            let z = c(x, 1e-4);
            let sol = solve_fixed_point(&semicircle(), z, &SolverConfig::default(), None).unwrap();
            assert_abs_diff_eq!((sol.g[(0, 0)] - closed_form(z)).norm(), 0.0, epsilon = 1e-8);
            assert!(sol.positivity <= POSITIVITY_TOL);
        }
    }

    #[test]
    fn plain_iteration_without_newton() {
        let config = SolverConfig {
            newton: false,
            ..Default::default()
        };
        let sol = solve_fixed_point(&semicircle(), c(0.3, 0.5), &config, None).unwrap();
        assert_abs_diff_eq!((sol.g[(0, 0)] - closed_form(c(0.3, 0.5))).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn asymptotic_normalization() {
        let eta = validate_covariance(isi_covariance(2, 2, None).unwrap())
            .unwrap()
            .eta_map();
        for y in [1e3, 1e6] {
            let sol = solve_fixed_point(&eta, c(0.0, y), &SolverConfig::default(), None).unwrap();
            let d = eta.dim_in();
            assert!((&sol.g * c(0.0, y) - identity(d)).norm() <= 1e-4);
        }
    }

    #[test]
    fn rejects_points_on_the_axis() {
        let err = solve_fixed_point(&semicircle(), c(1.0, 1e-9), &SolverConfig::default(), None);
        assert!(matches!(err, Err(Error::InvalidPoint { .. })));
    }

    #[test]
    fn non_square_map_is_rejected() {
        let (eta1, _) = validate_covariance(isi_covariance(2, 2, None).unwrap())
            .unwrap()
            .eta_pair()
            .unwrap();
        let err = solve_fixed_point(&eta1, c(0.0, 1.0), &SolverConfig::default(), None);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn iteration_cap_reports_best_iterate() {
        let config = SolverConfig {
            max_iter: 3,
            newton: false,
            ..Default::default()
        };
        match solve_fixed_point(&semicircle(), c(0.1, 0.01), &config, None) {
            Err(Error::NoConvergence { best, .. }) => {
                assert!(!best.converged);
                assert!(best.residual > config.tol);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn newton_from_nearby_start() {
        let sol = newton_refine(
            &semicircle(),
            c(0.0, 1.0),
            &CMat::from_element(1, 1, c(0.0, -0.6)),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(sol.iterations <= 5);
        assert_abs_diff_eq!(sol.g[(0, 0)].im, (1.0 - 5f64.sqrt()) / 2.0, epsilon = 1e-10);
    }

    #[test]
    fn newton_at_exact_solution_returns_immediately() {
        let z = c(0.7, 0.4);
        let exact = solve_fixed_point(&semicircle(), z, &SolverConfig::default(), None).unwrap();
        let again = newton_refine(&semicircle(), z, &exact.g, &SolverConfig::default()).unwrap();
        assert!(again.iterations <= 1);
        assert!(again.residual <= exact.residual.max(1e-10));
    }

    #[test]
    fn newton_agrees_with_iteration_on_isi() {
        let eta = validate_covariance(hermitized_isi()).unwrap().eta_map();
        let z = c(2.0, 0.01);
        let fp_config = SolverConfig {
            newton: false,
            max_iter: 200_000,
            ..Default::default()
        };
        let fp = solve_equation(&Semicircle::new(&eta), z, &fp_config, None).unwrap();
        let nt = newton_refine(&eta, z, &fp.g.map(|v| v * 0.99), &SolverConfig::default()).unwrap();
        assert!((fp.g - nt.g).norm() < 1e-9);
    }

    fn hermitized_isi() -> CovarianceSpec {
        crate::covariance::hermitize_covariance(&isi_covariance(4, 4, None).unwrap()).unwrap()
    }

    #[test]
    fn grid_far_outside_support() {
        let sols = solve_grid(&semicircle(), &[10.0, 11.0, 12.0], 0.5, &SolverConfig::default()).unwrap();
        for (x, s) in [10.0, 11.0, 12.0].iter().zip(&sols) {
            assert!((s.g[(0, 0)] - 1.0 / c(*x, 0.5)).norm() < 1e-2);
        }
        let sols = solve_grid(&semicircle(), &[10.0, 11.0, 12.0], 1e-3, &SolverConfig::default()).unwrap();
        for (x, s) in [10.0, 11.0, 12.0].iter().zip(&sols) {
            assert!((s.g[(0, 0)] - 1.0 / c(*x, 1e-3)).norm() < 1e-2);
        }
    }

    #[test]
    fn grid_center_density() {
        let sols = solve_grid(&semicircle(), &[0.0], 1e-4, &SolverConfig::default()).unwrap();
        assert_abs_diff_eq!(sols[0].g[(0, 0)].im, -1.0, epsilon = 1e-4);
    }

    #[test]
    fn sweep_direction_does_not_matter() {
        let xs: Vec<f64> = (0..200).map(|i| -2.5 + 5.0 * i as f64 / 199.0).collect();
        let rev: Vec<f64> = xs.iter().rev().copied().collect();
        let fwd = solve_grid(&semicircle(), &xs, 1e-3, &SolverConfig::default()).unwrap();
        let bwd = solve_grid(&semicircle(), &rev, 1e-3, &SolverConfig::default()).unwrap();
        for (a, b) in fwd.iter().zip(bwd.iter().rev()) {
            assert!((&a.g - &b.g).norm() < 1e-9);
        }
    }

    #[test]
    fn grid_rejects_bad_epsilon() {
        assert!(matches!(
            solve_grid(&semicircle(), &[0.0], 0.0, &SolverConfig::default()),
            Err(Error::GridError(_))
        ));
    }

    #[test]
    fn marchenko_pastur_at_five() {
        let sol = solve_hh_star(&mp_spec(), c(5.0, 1e-8), &SolverConfig::default()).unwrap();
        assert_abs_diff_eq!(sol.g.re, (5.0 - 5f64.sqrt()) / 10.0, epsilon = 1e-10);
        assert!(sol.residuals.0 <= 1e-10 && sol.residuals.1 <= 1e-10);
        let direct = solve_hh_star_direct(&mp_spec(), c(5.0, 1e-8), &SolverConfig::default()).unwrap();
        assert_abs_diff_eq!((direct.g - sol.g).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn hh_corners_vanish() {
        let sol = solve_hh_star(
            &isi_covariance(3, 2, None).unwrap(),
            c(0.4, 0.05),
            &SolverConfig::default(),
        )
        .unwrap();
        let a = 3;
        assert_eq!(crate::linalg::max_abs(sol.h.view((0, a), (a, 4)).iter()), 0.0);
        assert_eq!(crate::linalg::max_abs(sol.h.view((a, 0), (4, a)).iter()), 0.0);
    }

    #[test]
    fn hh_star_rejects_selfadjoint() {
        let spec = CovarianceSpec::SelfAdjoint {
            d: 1,
            sigma: vec![SigmaEntry::real(0, 0, 0, 0, 1.0)],
        };
        assert!(matches!(
            solve_hh_star(&spec, c(1.0, 1.0), &SolverConfig::default()),
            Err(Error::WrongKind { .. })
        ));
    }

    #[test]
    fn contour_moments_of_semicircle() {
        let m = moment_check(&semicircle(), &[1.0], 4.0, 6, &SolverConfig::default()).unwrap();
        let expected = [1.0, 0.0, 1.0, 0.0, 2.0, 0.0, 5.0];
        for (got, want) in m.iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-6);
        }
    }

    #[test]
    fn contour_radius_too_small() {
        assert!(matches!(
            moment_check(&semicircle(), &[1.0], 2.2, 4, &SolverConfig::default()),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn gram_law_matches_hh_route() {
        let cov = validate_covariance(isi_covariance(2, 2, None).unwrap()).unwrap();
        let law = Law::from_covariance(&cov);
        let z = c(0.6, 0.02);
        let p = law.cauchy(z, &SolverConfig::default(), None).unwrap();
        let hh = solve_hh_star(cov.spec(), z, &SolverConfig::default()).unwrap();
        assert_abs_diff_eq!((p.g - hh.g).norm(), 0.0, epsilon = 1e-10);
        assert_eq!(law.zero_atom(), 0.0);
        let lower = law.with_side(GramSide::Lower);
        assert_abs_diff_eq!(lower.zero_atom(), 1.0 / 3.0, epsilon = 1e-15);
        let q = lower.cauchy(z, &SolverConfig::default(), None).unwrap();
        assert_abs_diff_eq!(
            (q.g - crate::linalg::normalized_trace(&hh.g2)).norm(),
            0.0,
            epsilon = 1e-10
        );
    }
}
