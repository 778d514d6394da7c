//! Covariance structures of block Gaussian matrices and the linear
//! covariance maps they induce.
//!
//! Three kinds of models are supported:
//!
//! * selfadjoint `d × d` block matrices with covariance function
//!   `σ(i,j;k,l) = dN · E[a⁽ⁱʲ⁾_rp a⁽ᵏˡ⁾_ps]`,
//! * non-selfadjoint `a × b` block matrices `H` with real covariance
//!   function `τ(i,k;j,l) = (a+b)N · E[h⁽ⁱᵏ⁾_rp conj(h⁽ʲˡ⁾_rp)]`,
//! * selfadjoint matrices with rectangular blocks of relative sizes `α`.
//!
//! Indices are zero-based throughout the library.

use std::collections::BTreeMap;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{min_hermitian_eigenvalue, CMat};

/// Values closer than this are considered equal when closing the covariance
/// under its symmetries.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// The Choi matrix may dip this far below zero before a warning is raised.
pub const CHOI_TOL: f64 = 1e-10;
const WEIGHT_TOL: f64 = 1e-12;

/// One stored value `σ(i,j;k,l)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaEntry {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub l: usize,
    pub value: Complex64,
}

impl SigmaEntry {
    pub fn new(i: usize, j: usize, k: usize, l: usize, value: Complex64) -> Self {
        Self { i, j, k, l, value }
    }

    pub fn real(i: usize, j: usize, k: usize, l: usize, value: f64) -> Self {
        Self::new(i, j, k, l, Complex64::new(value, 0.0))
    }
}

/// One stored value `τ(i,k;j,l)`: `i, j` index receive blocks (rows of `H`),
/// `k, l` transmit blocks (columns).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauEntry {
    pub i: usize,
    pub k: usize,
    pub j: usize,
    pub l: usize,
    pub value: f64,
}

impl TauEntry {
    pub fn new(i: usize, k: usize, j: usize, l: usize, value: f64) -> Self {
        Self { i, k, j, l, value }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CovarianceSpec {
    /// Square `d × d` blocks of equal size.
    SelfAdjoint { d: usize, sigma: Vec<SigmaEntry> },
    /// Non-selfadjoint `a × b` block matrix `H`, studied through `HH*`.
    HhStar { a: usize, b: usize, tau: Vec<TauEntry> },
    /// Selfadjoint matrix whose block `(i,j)` has size `α_i n × α_j n`.
    Rectangular { alpha: Vec<f64>, sigma: Vec<SigmaEntry> },
}

impl CovarianceSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            CovarianceSpec::SelfAdjoint { .. } => "selfadjoint",
            CovarianceSpec::HhStar { .. } => "hh_star",
            CovarianceSpec::Rectangular { .. } => "rectangular",
        }
    }

    /// Number of blocks of the selfadjoint matrix (`a + b` for `HH*` models).
    pub fn dim(&self) -> usize {
        match self {
            CovarianceSpec::SelfAdjoint { d, .. } => *d,
            CovarianceSpec::HhStar { a, b, .. } => a + b,
            CovarianceSpec::Rectangular { alpha, .. } => alpha.len(),
        }
    }

    /// Block weights of the trace that turns `𝒢` into the scalar Cauchy
    /// transform: `1/d` each for square blocks, `α` for rectangular blocks.
    pub fn trace_weights(&self) -> Vec<f64> {
        match self {
            CovarianceSpec::Rectangular { alpha, .. } => alpha.clone(),
            _ => {
                let d = self.dim();
                vec![1.0 / d as f64; d]
            }
        }
    }

    /// Builds a valid selfadjoint covariance from generator matrices `B_m`,
    /// so that `η(D) = Σ_m (B_m D B_m* + B_m* D B_m)`. The result is
    /// completely positive by construction.
    pub fn from_generators(generators: &[CMat]) -> Result<Self> {
        let d = generators
            .first()
            .map(|g| g.nrows())
            .ok_or_else(|| Error::BadParameter("at least one generator is required".into()))?;
        let mut acc: BTreeMap<(usize, usize, usize, usize), Complex64> = BTreeMap::new();
        for g in generators {
            if g.shape() != (d, d) {
                return Err(Error::DimensionMismatch {
                    expected: (d, d),
                    found: g.shape(),
                });
            }
            let adj = g.adjoint();
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        for l in 0..d {
                            let v = (g[(i, j)] * adj[(k, l)] + adj[(i, j)] * g[(k, l)]) * d as f64;
                            if v.norm() > 0.0 {
                                *acc.entry((i, j, k, l)).or_default() += v;
                            }
                        }
                    }
                }
            }
        }
        let sigma = acc
            .into_iter()
            .filter(|(_, v)| v.norm() > 1e-15)
            .map(|((i, j, k, l), v)| SigmaEntry::new(i, j, k, l, v))
            .collect();
        Ok(CovarianceSpec::SelfAdjoint { d, sigma })
    }
}

/// A covariance closed under its symmetries together with its positivity
/// diagnostics.
#[derive(Clone, Debug)]
pub struct ValidatedCovariance {
    spec: CovarianceSpec,
    choi_min_eigenvalue: f64,
}

impl ValidatedCovariance {
    pub fn spec(&self) -> &CovarianceSpec {
        &self.spec
    }

    pub fn choi_min_eigenvalue(&self) -> f64 {
        self.choi_min_eigenvalue
    }

    /// True when the covariance map fails the complete positivity check.
    pub fn positivity_warning(&self) -> bool {
        self.choi_min_eigenvalue < -CHOI_TOL
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn trace_weights(&self) -> Vec<f64> {
        self.spec.trace_weights()
    }

    /// The covariance map of the selfadjoint matrix: `η`, `η_α`, or for
    /// `HH*` models the map of the hermitization `[[0, H], [H*, 0]]`.
    pub fn eta_map(&self) -> EtaMap {
        match &self.spec {
            CovarianceSpec::SelfAdjoint { d, sigma } => sigma_eta(*d, sigma, &vec![1.0 / *d as f64; *d]),
            CovarianceSpec::Rectangular { alpha, sigma } => sigma_eta(alpha.len(), sigma, alpha),
            CovarianceSpec::HhStar { a, b, tau } => EtaMap::two_block(&tau_eta1(*a, *b, tau), &tau_eta2(*a, *b, tau))
                .expect("η₁/η₂ shapes are consistent by construction"),
        }
    }

    /// `(η₁, η₂)` of an `HH*` model.
    pub fn eta_pair(&self) -> Result<(EtaMap, EtaMap)> {
        match &self.spec {
            CovarianceSpec::HhStar { a, b, tau } => Ok((tau_eta1(*a, *b, tau), tau_eta2(*a, *b, tau))),
            other => Err(Error::WrongKind {
                expected: "hh_star",
                found: other.kind_name(),
            }),
        }
    }
}

/// Checks indices, weights and symmetry; fills in every symmetry-implied
/// entry and computes the minimum eigenvalue of the Choi matrix of `η`.
///
/// A negative Choi eigenvalue is reported through
/// [`ValidatedCovariance::positivity_warning`] and a log warning, not as an
/// error.
pub fn validate_covariance(spec: CovarianceSpec) -> Result<ValidatedCovariance> {
    let closed = match spec {
        CovarianceSpec::SelfAdjoint { d, sigma } => {
            if d == 0 {
                return Err(Error::BadParameter("block count d must be positive".into()));
            }
            CovarianceSpec::SelfAdjoint {
                d,
                sigma: close_sigma(d, &sigma)?,
            }
        }
        CovarianceSpec::Rectangular { alpha, sigma } => {
            check_alpha(&alpha)?;
            let d = alpha.len();
            let sigma = close_sigma(d, &sigma)?;
            for e in &sigma {
                if !same_weight(alpha[e.i], alpha[e.l]) || !same_weight(alpha[e.j], alpha[e.k]) {
                    return Err(Error::PatternViolation(format!(
                        "σ({},{};{},{}) must vanish unless α_i = α_l and α_j = α_k",
                        e.i, e.j, e.k, e.l
                    )));
                }
            }
            CovarianceSpec::Rectangular { alpha, sigma }
        }
        CovarianceSpec::HhStar { a, b, tau } => {
            if a == 0 || b == 0 {
                return Err(Error::BadParameter("block counts a and b must be positive".into()));
            }
            CovarianceSpec::HhStar {
                a,
                b,
                tau: close_tau(a, b, &tau)?,
            }
        }
    };
    let mut validated = ValidatedCovariance {
        spec: closed,
        choi_min_eigenvalue: 0.0,
    };
    let choi = validated.eta_map().choi_matrix();
    validated.choi_min_eigenvalue = min_hermitian_eigenvalue(&choi);
    if validated.positivity_warning() {
        log::warn!(
            "covariance map is not completely positive: Choi min eigenvalue {:.3e}",
            validated.choi_min_eigenvalue
        );
    }
    Ok(validated)
}

fn same_weight(x: f64, y: f64) -> bool {
    (x - y).abs() <= WEIGHT_TOL
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    if alpha.is_empty() {
        return Err(Error::WeightError("α must not be empty".into()));
    }
    if let Some(bad) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0 && **a < 1.0)) {
        return Err(Error::WeightError(format!("α_i = {bad} is outside (0, 1)")));
    }
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(Error::WeightError(format!("α sums to {sum}, not 1")));
    }
    Ok(())
}

fn check_index(index: usize, bound: usize, context: &str) -> Result<()> {
    if index >= bound {
        return Err(Error::IndexOutOfRange {
            index,
            bound,
            context: context.to_string(),
        });
    }
    Ok(())
}

type SigmaKey = (usize, usize, usize, usize);

fn insert_consistent(map: &mut BTreeMap<SigmaKey, Complex64>, key: SigmaKey, value: Complex64) -> Result<()> {
    match map.get(&key) {
        Some(existing) if (existing - value).norm() > SYMMETRY_TOL => Err(Error::SymmetryViolation {
            entry: format!("σ({},{};{},{})", key.0, key.1, key.2, key.3),
            expected: value,
            found: *existing,
        }),
        Some(_) => Ok(()),
        None => {
            map.insert(key, value);
            Ok(())
        }
    }
}

/// Closes `σ` under `σ(i,j;k,l) = σ(k,l;i,j)` (the two factors of a
/// Gaussian moment commute) and `σ(i,j;k,l) = conj σ(l,k;j,i)` (the matrix
/// is selfadjoint). Together they make `η` Hermiticity preserving.
fn close_sigma(d: usize, sigma: &[SigmaEntry]) -> Result<Vec<SigmaEntry>> {
    let mut map = BTreeMap::new();
    for e in sigma {
        for idx in [e.i, e.j, e.k, e.l] {
            check_index(idx, d, "σ entry")?;
        }
        if !e.value.is_finite() {
            return Err(Error::BadParameter(format!(
                "σ({},{};{},{}) is not finite",
                e.i, e.j, e.k, e.l
            )));
        }
        insert_consistent(&mut map, (e.i, e.j, e.k, e.l), e.value)?;
    }
    let stored: Vec<(SigmaKey, Complex64)> = map.iter().map(|(k, v)| (*k, *v)).collect();
    for ((i, j, k, l), v) in stored {
        insert_consistent(&mut map, (k, l, i, j), v)?;
        insert_consistent(&mut map, (l, k, j, i), v.conj())?;
        insert_consistent(&mut map, (j, i, l, k), v.conj())?;
    }
    Ok(map
        .into_iter()
        .filter(|(_, v)| v.norm() > 0.0)
        .map(|((i, j, k, l), value)| SigmaEntry { i, j, k, l, value })
        .collect())
}

/// Closes `τ` under `τ(i,k;j,l) = τ(j,l;i,k)`.
fn close_tau(a: usize, b: usize, tau: &[TauEntry]) -> Result<Vec<TauEntry>> {
    let mut map = BTreeMap::new();
    for e in tau {
        check_index(e.i, a, "τ receive index i")?;
        check_index(e.j, a, "τ receive index j")?;
        check_index(e.k, b, "τ transmit index k")?;
        check_index(e.l, b, "τ transmit index l")?;
        if !e.value.is_finite() {
            return Err(Error::BadParameter(format!(
                "τ({},{};{},{}) is not finite",
                e.i, e.k, e.j, e.l
            )));
        }
        insert_consistent(&mut map, (e.i, e.k, e.j, e.l), Complex64::from(e.value))?;
    }
    let stored: Vec<(SigmaKey, Complex64)> = map.iter().map(|(k, v)| (*k, *v)).collect();
    for ((i, k, j, l), v) in stored {
        insert_consistent(&mut map, (j, l, i, k), v)?;
    }
    Ok(map
        .into_iter()
        .filter(|(_, v)| v.re != 0.0)
        .map(|((i, k, j, l), v)| TauEntry::new(i, k, j, l, v.re))
        .collect())
}

/// `[η(D)]_ij = Σ_{k,l} σ(i,k;l,j) w_k [D]_kl`.
fn sigma_eta(d: usize, sigma: &[SigmaEntry], weights: &[f64]) -> EtaMap {
    let terms = sigma
        .iter()
        .map(|e| EtaTerm {
            out: (e.i, e.l),
            input: (e.j, e.k),
            coeff: e.value * weights[e.j],
        })
        .collect();
    EtaMap::from_terms(d, d, terms).expect("σ indices are validated")
}

/// `[η₁(D)]_ij = 1/(a+b) Σ_{k,l} τ(i,k;j,l) [D]_kl`, mapping `b × b` to `a × a`.
fn tau_eta1(a: usize, b: usize, tau: &[TauEntry]) -> EtaMap {
    let scale = 1.0 / (a + b) as f64;
    let terms = tau
        .iter()
        .map(|e| EtaTerm {
            out: (e.i, e.j),
            input: (e.k, e.l),
            coeff: Complex64::from(e.value * scale),
        })
        .collect();
    EtaMap::from_terms(b, a, terms).expect("τ indices are validated")
}

/// `[η₂(D)]_kl = 1/(a+b) Σ_{i,j} τ(i,k;j,l) [D]_ij`, mapping `a × a` to
/// `b × b`. This is `E[H* D H]` for the normalized `H`.
fn tau_eta2(a: usize, b: usize, tau: &[TauEntry]) -> EtaMap {
    let scale = 1.0 / (a + b) as f64;
    let terms = tau
        .iter()
        .map(|e| EtaTerm {
            out: (e.k, e.l),
            input: (e.i, e.j),
            coeff: Complex64::from(e.value * scale),
        })
        .collect();
    EtaMap::from_terms(a, b, terms).expect("τ indices are validated")
}

/// One coefficient of a linear map on matrices:
/// `out[out] += coeff · input[input]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EtaTerm {
    pub out: (usize, usize),
    pub input: (usize, usize),
    pub coeff: Complex64,
}

/// A linear map from `dim_in × dim_in` to `dim_out × dim_out` complex
/// matrices, stored as a sparse coefficient list sorted by input position.
#[derive(Clone, Debug, PartialEq)]
pub struct EtaMap {
    dim_in: usize,
    dim_out: usize,
    terms: Vec<EtaTerm>,
    /// `terms[col_ptr[k*dim_in + l]..col_ptr[k*dim_in + l + 1]]` read input `(k,l)`.
    col_ptr: Vec<usize>,
}

impl EtaMap {
    pub fn from_terms(dim_in: usize, dim_out: usize, terms: Vec<EtaTerm>) -> Result<Self> {
        let mut merged: BTreeMap<((usize, usize), (usize, usize)), Complex64> = BTreeMap::new();
        for t in terms {
            check_index(t.input.0, dim_in, "η input row")?;
            check_index(t.input.1, dim_in, "η input column")?;
            check_index(t.out.0, dim_out, "η output row")?;
            check_index(t.out.1, dim_out, "η output column")?;
            *merged.entry((t.input, t.out)).or_default() += t.coeff;
        }
        let terms: Vec<EtaTerm> = merged
            .into_iter()
            .filter(|(_, c)| c.norm() > 0.0)
            .map(|((input, out), coeff)| EtaTerm { out, input, coeff })
            .collect();
        let mut col_ptr = vec![0; dim_in * dim_in + 1];
        for t in &terms {
            col_ptr[t.input.0 * dim_in + t.input.1 + 1] += 1;
        }
        for n in 1..col_ptr.len() {
            col_ptr[n] += col_ptr[n - 1];
        }
        Ok(Self {
            dim_in,
            dim_out,
            terms,
            col_ptr,
        })
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn is_square(&self) -> bool {
        self.dim_in == self.dim_out
    }

    pub fn terms(&self) -> &[EtaTerm] {
        &self.terms
    }

    pub fn apply(&self, d: &CMat) -> Result<CMat> {
        if d.shape() != (self.dim_in, self.dim_in) {
            return Err(Error::DimensionMismatch {
                expected: (self.dim_in, self.dim_in),
                found: d.shape(),
            });
        }
        Ok(self.apply_unchecked(d))
    }

    pub(crate) fn apply_unchecked(&self, d: &CMat) -> CMat {
        let mut out = CMat::zeros(self.dim_out, self.dim_out);
        for t in &self.terms {
            out[t.out] += t.coeff * d[t.input];
        }
        out
    }

    /// `η(E_kl)` for the matrix unit `E_kl`.
    pub fn apply_unit(&self, k: usize, l: usize) -> CMat {
        let mut out = CMat::zeros(self.dim_out, self.dim_out);
        let col = k * self.dim_in + l;
        for t in &self.terms[self.col_ptr[col]..self.col_ptr[col + 1]] {
            out[t.out] += t.coeff;
        }
        out
    }

    /// Block map on `(m + n) × (m + n)` matrices,
    /// `[[D₁, D₃], [D₄, D₂]] ↦ [[upper(D₂), 0], [0, lower(D₁)]]`,
    /// where `upper` maps `n × n → m × m` and `lower` maps `m × m → n × n`.
    pub fn two_block(upper: &EtaMap, lower: &EtaMap) -> Result<Self> {
        let m = upper.dim_out;
        let n = upper.dim_in;
        if lower.dim_in != m || lower.dim_out != n {
            return Err(Error::DimensionMismatch {
                expected: (m, n),
                found: (lower.dim_in, lower.dim_out),
            });
        }
        let mut terms = Vec::with_capacity(upper.terms.len() + lower.terms.len());
        terms.extend(upper.terms.iter().map(|t| EtaTerm {
            out: t.out,
            input: (t.input.0 + m, t.input.1 + m),
            coeff: t.coeff,
        }));
        terms.extend(lower.terms.iter().map(|t| EtaTerm {
            out: (t.out.0 + m, t.out.1 + m),
            input: t.input,
            coeff: t.coeff,
        }));
        EtaMap::from_terms(m + n, m + n, terms)
    }

    /// Choi matrix `Σ_{k,l} E_kl ⊗ η(E_kl)`; positive semidefinite exactly
    /// when the map is completely positive.
    pub fn choi_matrix(&self) -> CMat {
        let n = self.dim_in * self.dim_out;
        let mut choi = CMat::zeros(n, n);
        for t in &self.terms {
            let (k, l) = t.input;
            let (i, j) = t.out;
            choi[(k * self.dim_out + i, l * self.dim_out + j)] += t.coeff;
        }
        choi
    }

    /// `‖η(I)‖`, the operator norm of the image of the identity.
    pub fn identity_image_norm(&self) -> f64 {
        let img = self.apply_unchecked(&CMat::identity(self.dim_in, self.dim_in));
        let ev = crate::linalg::hermitian_eigenvalues(&img);
        ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// Radius `2 ‖η(I)‖^{1/2}` containing the spectrum of the semicircular
    /// element with this covariance.
    pub fn spectral_radius_bound(&self) -> f64 {
        2.0 * self.identity_image_norm().sqrt()
    }
}

/// `η(D)` for a map built from a validated covariance.
pub fn eta_apply(eta: &EtaMap, d: &CMat) -> Result<CMat> {
    eta.apply(d)
}

fn hh_pair(spec: &CovarianceSpec) -> Result<(EtaMap, EtaMap)> {
    match spec {
        CovarianceSpec::HhStar { .. } => validate_covariance(spec.clone())?.eta_pair(),
        other => Err(Error::WrongKind {
            expected: "hh_star",
            found: other.kind_name(),
        }),
    }
}

/// `η₁(D)` for a `b × b` matrix `D`.
pub fn eta1_apply(spec: &CovarianceSpec, d: &CMat) -> Result<CMat> {
    hh_pair(spec)?.0.apply(d)
}

/// `η₂(D)` for an `a × a` matrix `D`.
pub fn eta2_apply(spec: &CovarianceSpec, d: &CMat) -> Result<CMat> {
    hh_pair(spec)?.1.apply(d)
}

/// Selfadjoint covariance of `X = [[0, H], [H*, 0]]` on `a + b` blocks. Its
/// map sends `[[D₁, D₃], [D₄, D₂]]` to `[[η₁(D₂), 0], [0, η₂(D₁)]]`.
pub fn hermitize_covariance(spec: &CovarianceSpec) -> Result<CovarianceSpec> {
    let CovarianceSpec::HhStar { a, b, .. } = spec else {
        return Err(Error::WrongKind {
            expected: "hh_star",
            found: spec.kind_name(),
        });
    };
    let validated = validate_covariance(spec.clone())?;
    let CovarianceSpec::HhStar { tau: closed, .. } = validated.spec() else {
        unreachable!("validation preserves the kind");
    };
    let a = *a;
    let mut sigma = Vec::with_capacity(2 * closed.len());
    for e in closed {
        // E[h⁽ⁱᵏ⁾ conj h⁽ʲˡ⁾] feeds the (i, a+k) and (a+l, j) blocks of X ...
        sigma.push(SigmaEntry::real(e.i, a + e.k, a + e.l, e.j, e.value));
        // ... and, conjugated, the (a+k, i) and (j, a+l) blocks.
        sigma.push(SigmaEntry::real(a + e.k, e.i, e.j, a + e.l, e.value));
    }
    Ok(CovarianceSpec::SelfAdjoint { d: a + *b, sigma })
}

/// Covariance of the intersymbol-interference channel
/// `H = [[A₁ … A_L 0 …], [0 A₁ … A_L …], …]` with frame length `K` and `L`
/// taps: `K` block rows, `K + L − 1` block columns, tap `m` of variance
/// `taps[m]` (default 1).
pub fn isi_covariance(k: usize, l: usize, taps: Option<&[f64]>) -> Result<CovarianceSpec> {
    if k == 0 || l == 0 {
        return Err(Error::BadParameter("K and L must be at least 1".into()));
    }
    let unit = vec![1.0; l];
    let taps = taps.unwrap_or(&unit);
    if taps.len() != l {
        return Err(Error::BadParameter(format!(
            "expected {l} tap variances, got {}",
            taps.len()
        )));
    }
    if let Some(bad) = taps.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::BadParameter(format!("tap variance {bad} is not positive")));
    }
    let mut tau = Vec::with_capacity(k * k * l);
    for i in 0..k {
        for j in 0..k {
            for m in 0..l {
                // Block (i, i+m) and block (j, j+m) both carry tap m.
                tau.push(TauEntry::new(i, i + m, j, j + m, taps[m]));
            }
        }
    }
    Ok(CovarianceSpec::HhStar {
        a: k,
        b: k + l - 1,
        tau,
    })
}

/// Checks that `D` lies in `M_α`: `[D]_ij = 0` unless `α_i = α_j`.
pub fn check_alpha_pattern(alpha: &[f64], d: &CMat) -> Result<()> {
    let n = alpha.len();
    if d.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            expected: (n, n),
            found: d.shape(),
        });
    }
    for i in 0..n {
        for j in 0..n {
            if !same_weight(alpha[i], alpha[j]) && d[(i, j)].norm() > SYMMETRY_TOL {
                return Err(Error::PatternViolation(format!(
                    "entry ({i},{j}) couples blocks of different sizes"
                )));
            }
        }
    }
    Ok(())
}

/// Weighted covariance map `[η_α(D)]_ij = Σ σ(i,k;l,j) α_k [D]_kl`.
pub fn eta_alpha_apply(spec: &CovarianceSpec, d: &CMat) -> Result<CMat> {
    let CovarianceSpec::Rectangular { alpha, .. } = spec else {
        return Err(Error::WrongKind {
            expected: "rectangular",
            found: spec.kind_name(),
        });
    };
    check_alpha_pattern(alpha, d)?;
    validate_covariance(spec.clone())?.eta_map().apply(d)
}

/// Weighted trace `tr_α(D) = Σ α_i [D]_ii`.
pub fn tr_alpha(alpha: &[f64], d: &CMat) -> Complex64 {
    crate::linalg::weighted_trace(alpha, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, identity};
    use approx::assert_abs_diff_eq;

    fn close(a: &CMat, b: &CMat) -> f64 {
        (a - b).norm()
    }

    #[test]
    fn scalar_semicircle_is_valid() {
        let spec = CovarianceSpec::SelfAdjoint {
            d: 1,
            sigma: vec![SigmaEntry::real(0, 0, 0, 0, 1.0)],
        };
        let v = validate_covariance(spec).unwrap();
        assert_abs_diff_eq!(v.choi_min_eigenvalue(), 1.0, epsilon = 1e-14);
        assert!(!v.positivity_warning());
    }

    #[test]
    fn symmetry_closure_fills_partners() {
        let spec = CovarianceSpec::SelfAdjoint {
            d: 2,
            sigma: vec![
                SigmaEntry::new(0, 1, 0, 1, c(1.0, 0.0)),
                SigmaEntry::real(0, 1, 1, 0, 1.0),
            ],
        };
        let v = validate_covariance(spec).unwrap();
        let CovarianceSpec::SelfAdjoint { sigma, .. } = v.spec() else {
            panic!()
        };
        let find = |i, j, k, l| {
            sigma
                .iter()
                .find(|e| (e.i, e.j, e.k, e.l) == (i, j, k, l))
                .map(|e| e.value)
        };
        assert_eq!(find(1, 0, 1, 0), Some(c(1.0, 0.0)));
        assert_eq!(find(1, 0, 0, 1), Some(c(1.0, 0.0)));
    }

    #[test]
    fn complex_partner_is_conjugated() {
        let spec = CovarianceSpec::SelfAdjoint {
            d: 2,
            sigma: vec![SigmaEntry::new(0, 0, 0, 1, c(0.3, 0.2))],
        };
        let v = validate_covariance(spec).unwrap();
        let CovarianceSpec::SelfAdjoint { sigma, .. } = v.spec() else {
            panic!()
        };
        let partner = sigma.iter().find(|e| (e.i, e.j, e.k, e.l) == (1, 0, 0, 0)).unwrap();
        assert_eq!(partner.value, c(0.3, -0.2));
    }

    #[test]
    fn contradicting_entries_are_rejected() {
        let spec = CovarianceSpec::SelfAdjoint {
            d: 2,
            sigma: vec![SigmaEntry::real(0, 1, 1, 0, 1.0), SigmaEntry::real(1, 0, 0, 1, 2.0)],
        };
        assert!(matches!(
            validate_covariance(spec),
            Err(Error::SymmetryViolation { .. })
        ));
        // σ(0,1;1,0) is its own conjugate partner, so it must be real.
        let spec = CovarianceSpec::SelfAdjoint {
            d: 2,
            sigma: vec![SigmaEntry::new(0, 1, 1, 0, c(1.0, 0.5))],
        };
        assert!(matches!(
            validate_covariance(spec),
            Err(Error::SymmetryViolation { .. })
        ));
    }

    #[test]
    fn out_of_range_index() {
        let spec = CovarianceSpec::SelfAdjoint {
            d: 2,
            sigma: vec![SigmaEntry::real(0, 2, 0, 0, 1.0)],
        };
        assert!(matches!(validate_covariance(spec), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn isi_spec_has_unit_entries() {
        let spec = isi_covariance(4, 4, None).unwrap();
        let v = validate_covariance(spec).unwrap();
        let CovarianceSpec::HhStar { a, b, tau } = v.spec() else {
            panic!()
        };
        assert_eq!((*a, *b), (4, 7));
        assert_eq!(tau.len(), 4 * 4 * 4);
        assert!(tau.iter().all(|e| e.value == 1.0 && e.l + e.i == e.k + e.j));
        assert!(!v.positivity_warning());
        assert_eq!(v.dim(), 11);
    }

    #[test]
    fn isi_single_tap_is_iid() {
        let spec = isi_covariance(1, 1, None).unwrap();
        assert_eq!(
            spec,
            CovarianceSpec::HhStar {
                a: 1,
                b: 1,
                tau: vec![TauEntry::new(0, 0, 0, 0, 1.0)]
            }
        );
    }

    #[test]
    fn isi_two_taps_structure() {
        // H = [[A, B, 0], [0, A, B]]
        let CovarianceSpec::HhStar { a, b, tau } = isi_covariance(2, 2, None).unwrap() else {
            panic!()
        };
        assert_eq!((a, b), (2, 3));
        let has = |i, k, j, l| tau.iter().any(|e| (e.i, e.k, e.j, e.l) == (i, k, j, l));
        assert!(has(0, 0, 1, 1)); // A at (0,0) and (1,1)
        assert!(has(0, 1, 1, 2)); // B at (0,1) and (1,2)
        assert!(!has(0, 0, 1, 2)); // A and B are independent
        assert!(!has(0, 2, 0, 2)); // block (0,2) is zero
    }

    #[test]
    fn isi_rejects_bad_parameters() {
        assert!(isi_covariance(0, 2, None).is_err());
        assert!(isi_covariance(2, 2, Some(&[1.0])).is_err());
        assert!(isi_covariance(2, 2, Some(&[1.0, -1.0])).is_err());
    }

    #[test]
    fn eta_scalar() {
        let spec = CovarianceSpec::SelfAdjoint {
            d: 1,
            sigma: vec![SigmaEntry::real(0, 0, 0, 0, 1.0)],
        };
        let eta = validate_covariance(spec).unwrap().eta_map();
        let out = eta_apply(&eta, &CMat::from_element(1, 1, c(2.0, 0.0))).unwrap();
        assert_eq!(out[(0, 0)], c(2.0, 0.0));
    }

    #[test]
    fn eta_trace_map() {
        // σ(i,j;k,l) = δ_il δ_jk
        let mut sigma = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                sigma.push(SigmaEntry::real(i, j, j, i, 1.0));
            }
        }
        let eta = validate_covariance(CovarianceSpec::SelfAdjoint { d: 2, sigma })
            .unwrap()
            .eta_map();
        let out = eta.apply(&identity(2)).unwrap();
        assert_abs_diff_eq!(close(&out, &identity(2)), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn eta_dimension_mismatch() {
        let eta = validate_covariance(CovarianceSpec::SelfAdjoint {
            d: 2,
            sigma: vec![SigmaEntry::real(0, 0, 0, 0, 1.0)],
        })
        .unwrap()
        .eta_map();
        assert!(matches!(eta.apply(&identity(3)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn isi_eta2_on_symmetric_diagonal() {
        let spec = isi_covariance(4, 4, None).unwrap();
        let (f1, f2) = (c(0.3, -0.1), c(0.7, -0.4));
        let d = CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![f1, f2, f2, f1]));
        let out = eta2_apply(&spec, &d).unwrap();
        let expected = [
            f1,
            f1 + f2,
            f1 + f2 * 2.0,
            f1 * 2.0 + f2 * 2.0,
            f1 + f2 * 2.0,
            f1 + f2,
            f1,
        ];
        for (n, e) in expected.iter().enumerate() {
            assert_abs_diff_eq!((out[(n, n)] - e / 11.0).norm(), 0.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(out.norm_squared() - out.diagonal().norm_squared(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn isi_eta1_diagonal_window() {
        let spec = isi_covariance(4, 4, None).unwrap();
        let vals: Vec<Complex64> = (0..7).map(|n| c(n as f64 + 1.0, 0.5 * n as f64)).collect();
        let d = CMat::from_diagonal(&nalgebra::DVector::from_vec(vals.clone()));
        let out = eta1_apply(&spec, &d).unwrap();
        for i in 0..4 {
            let window: Complex64 = vals[i..i + 4].iter().sum();
            assert_abs_diff_eq!((out[(i, i)] - window / 11.0).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn scalar_hh_maps() {
        let spec = CovarianceSpec::HhStar {
            a: 1,
            b: 1,
            tau: vec![TauEntry::new(0, 0, 0, 0, 2.0)],
        };
        let one = CMat::from_element(1, 1, c(1.0, 0.0));
        assert_eq!(eta1_apply(&spec, &one).unwrap()[(0, 0)], c(1.0, 0.0));
        assert_eq!(eta2_apply(&spec, &one).unwrap()[(0, 0)], c(1.0, 0.0));
        let sa = CovarianceSpec::SelfAdjoint {
            d: 1,
            sigma: vec![SigmaEntry::real(0, 0, 0, 0, 1.0)],
        };
        assert!(matches!(eta1_apply(&sa, &one), Err(Error::WrongKind { .. })));
        assert!(matches!(
            eta1_apply(&spec, &identity(2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn hermitize_scalar() {
        let spec = CovarianceSpec::HhStar {
            a: 1,
            b: 1,
            tau: vec![TauEntry::new(0, 0, 0, 0, 3.0)],
        };
        let CovarianceSpec::SelfAdjoint { d, sigma } = hermitize_covariance(&spec).unwrap() else {
            panic!()
        };
        assert_eq!(d, 2);
        let mut keys: Vec<_> = sigma.iter().map(|e| ((e.i, e.j, e.k, e.l), e.value)).collect();
        keys.sort_by_key(|k| k.0);
        assert_eq!(keys, vec![((0, 1, 1, 0), c(3.0, 0.0)), ((1, 0, 0, 1), c(3.0, 0.0))]);
    }

    #[test]
    fn hermitized_isi_is_diagonal_preserving() {
        let herm = hermitize_covariance(&isi_covariance(4, 4, None).unwrap()).unwrap();
        assert_eq!(herm.dim(), 11);
        let eta = validate_covariance(herm).unwrap().eta_map();
        let diag = CMat::from_diagonal(&nalgebra::DVector::from_fn(11, |n, _| c(n as f64 + 1.0, -0.3)));
        let out = eta.apply(&diag).unwrap();
        assert_abs_diff_eq!(out.norm_squared() - out.diagonal().norm_squared(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn hermitized_map_splits_into_pair() {
        let spec = isi_covariance(2, 3, Some(&[1.0, 0.5, 2.0])).unwrap();
        let herm = validate_covariance(hermitize_covariance(&spec).unwrap())
            .unwrap()
            .eta_map();
        let (a, b) = (2, 4);
        let d1 = CMat::from_fn(a, a, |i, j| c(i as f64 + 0.3 * j as f64, j as f64 - 0.7 * i as f64));
        let d2 = CMat::from_fn(b, b, |i, j| c(0.2 * (i * j) as f64 - 1.0, (i + 2 * j) as f64));
        let mut block = CMat::zeros(a + b, a + b);
        block.view_mut((0, 0), (a, a)).copy_from(&d1);
        block.view_mut((a, a), (b, b)).copy_from(&d2);
        let out = herm.apply(&block).unwrap();
        let e1 = eta1_apply(&spec, &d2).unwrap();
        let e2 = eta2_apply(&spec, &d1).unwrap();
        assert_abs_diff_eq!(close(&out.view((0, 0), (a, a)).into_owned(), &e1), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(close(&out.view((a, a), (b, b)).into_owned(), &e2), 0.0, epsilon = 1e-12);
        assert_eq!(crate::linalg::max_abs(out.view((0, a), (a, b)).iter()), 0.0);
        assert_eq!(crate::linalg::max_abs(out.view((a, 0), (b, a)).iter()), 0.0);
        // The hermitized map agrees with the one built directly from τ.
        let direct = validate_covariance(spec).unwrap().eta_map();
        assert_abs_diff_eq!(close(&direct.apply(&block).unwrap(), &out), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn hermitize_rejects_selfadjoint() {
        let sa = CovarianceSpec::SelfAdjoint { d: 1, sigma: vec![] };
        assert!(matches!(hermitize_covariance(&sa), Err(Error::WrongKind { .. })));
    }

    fn two_block_rect() -> CovarianceSpec {
        CovarianceSpec::Rectangular {
            alpha: vec![1.0 / 3.0, 2.0 / 3.0],
            sigma: vec![SigmaEntry::real(0, 1, 1, 0, 1.0)],
        }
    }

    #[test]
    fn eta_alpha_direct_evaluation() {
        let d = CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![c(5.0, 0.0), c(3.0, -1.0)]));
        let out = eta_alpha_apply(&two_block_rect(), &d).unwrap();
        assert_abs_diff_eq!((out[(0, 0)] - c(3.0, -1.0) * (2.0 / 3.0)).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((out[(1, 1)] - c(5.0, 0.0) * (1.0 / 3.0)).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn eta_alpha_pattern_violation() {
        let mut d = identity(2);
        d[(0, 1)] = c(1.0, 0.0);
        assert!(matches!(
            eta_alpha_apply(&two_block_rect(), &d),
            Err(Error::PatternViolation(_))
        ));
        let bad = CovarianceSpec::Rectangular {
            alpha: vec![1.0 / 3.0, 2.0 / 3.0],
            sigma: vec![SigmaEntry::real(0, 1, 0, 1, 1.0)],
        };
        assert!(matches!(validate_covariance(bad), Err(Error::PatternViolation(_))));
    }

    #[test]
    fn weights_are_checked() {
        for alpha in [vec![0.5, 0.6], vec![1.0], vec![0.0, 1.0], vec![]] {
            let spec = CovarianceSpec::Rectangular { alpha, sigma: vec![] };
            assert!(matches!(validate_covariance(spec), Err(Error::WeightError(_))));
        }
    }

    #[test]
    fn weighted_trace_of_identity() {
        for alpha in [vec![0.25, 0.75], vec![0.1, 0.2, 0.3, 0.4]] {
            let n = alpha.len();
            assert_abs_diff_eq!(tr_alpha(&alpha, &identity(n)).re, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn choi_detects_transpose_map() {
        // σ(i,k;l,j) = δ_il δ_kj gives η(D) = Dᵀ/2, positive but not completely positive.
        let mut sigma = Vec::new();
        for i in 0..2 {
            for k in 0..2 {
                sigma.push(SigmaEntry::real(i, k, i, k, 1.0));
            }
        }
        let v = validate_covariance(CovarianceSpec::SelfAdjoint { d: 2, sigma }).unwrap();
        assert!(v.positivity_warning());
    }

    #[test]
    fn generators_give_completely_positive_maps() {
        let g = CMat::from_fn(3, 3, |i, j| c((i as f64 - j as f64) * 0.4, (i * j) as f64 * 0.1));
        let spec = CovarianceSpec::from_generators(&[g.clone()]).unwrap();
        let v = validate_covariance(spec).unwrap();
        assert!(v.choi_min_eigenvalue() > -1e-12);
        let d = CMat::from_fn(3, 3, |i, j| c(i as f64 + 1.0, j as f64 - 1.0));
        let expected = &g * &d * g.adjoint() + g.adjoint() * &d * &g;
        assert_abs_diff_eq!(close(&v.eta_map().apply(&d).unwrap(), &expected), 0.0, epsilon = 1e-12);
    }
}
