//! Non-separable correlated fading.
//!
//! The channel covariance is a sum of `t` Kronecker terms,
//! `E[h_pj conj h_qk] = Σ_s Ψ⁽ˢ⁾_jk Ψ̂⁽ˢ⁾_pq`. The correlation algebras are
//! realized as `p × p` and `q × q` matrices with the normalized trace as
//! state `φ`, which turns the equation for `𝒢₁` into a finite system:
//!
//! ```text
//! z𝒢₁ = I + η₂((I − η₁(𝒢₁))⁻¹) 𝒢₁,
//! η₁(b) = Σ_s Ψ̂_s φ(bΨ_s),   η₂(b) = Σ_s Ψ_s φ(bΨ̂_s).
//! ```

use num_complex::Complex64;

use crate::covariance::{EtaMap, EtaTerm};
use crate::error::{Error, Result};
use crate::linalg::{is_hermitian, min_hermitian_eigenvalue, normalized_trace, CMat};
use crate::solver::{solve_eliminated, CauchySolution, GramSide, Law, SolverConfig};

const HERMITIAN_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

/// The families `{Ψ_s}` (`p × p`) and `{Ψ̂_s}` (`q × q`).
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationFamily {
    psi: Vec<CMat>,
    psi_hat: Vec<CMat>,
}

fn check_member(m: &CMat, size: usize, name: &str, s: usize) -> Result<()> {
    if m.shape() != (size, size) {
        return Err(Error::DimensionMismatch {
            expected: (size, size),
            found: m.shape(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::BadParameter(format!("{name}[{s}] has non-finite entries")));
    }
    if !is_hermitian(m, HERMITIAN_TOL) {
        return Err(Error::BadParameter(format!("{name}[{s}] is not Hermitian")));
    }
    let min = min_hermitian_eigenvalue(m);
    if min < -PSD_TOL {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    Ok(())
}

impl CorrelationFamily {
    pub fn new(psi: Vec<CMat>, psi_hat: Vec<CMat>) -> Result<Self> {
        if psi.is_empty() {
            return Err(Error::BadParameter("at least one correlation term is required".into()));
        }
        if psi.len() != psi_hat.len() {
            return Err(Error::BadParameter(format!(
                "{} Ψ matrices but {} Ψ̂ matrices",
                psi.len(),
                psi_hat.len()
            )));
        }
        let p = psi[0].nrows();
        let q = psi_hat[0].nrows();
        if p == 0 || q == 0 {
            return Err(Error::BadParameter("correlation matrices must be nonempty".into()));
        }
        for (s, m) in psi.iter().enumerate() {
            check_member(m, p, "psi", s)?;
        }
        for (s, m) in psi_hat.iter().enumerate() {
            check_member(m, q, "psi_hat", s)?;
        }
        Ok(Self { psi, psi_hat })
    }

    pub fn t(&self) -> usize {
        self.psi.len()
    }

    pub fn p(&self) -> usize {
        self.psi[0].nrows()
    }

    pub fn q(&self) -> usize {
        self.psi_hat[0].nrows()
    }

    pub fn psi(&self) -> &[CMat] {
        &self.psi
    }

    pub fn psi_hat(&self) -> &[CMat] {
        &self.psi_hat
    }
}

/// `b ↦ Σ_s left_s φ(b right_s)`, mapping `right`-sized to `left`-sized
/// matrices.
fn trace_sum_map(left: &[CMat], right: &[CMat]) -> Result<EtaMap> {
    let n_in = right[0].nrows();
    let n_out = left[0].nrows();
    let mut terms = Vec::new();
    for (l, r) in left.iter().zip(right) {
        for k in 0..n_in {
            for m in 0..n_in {
                // φ(b R) = (1/n) Σ_{k,m} b_km R_mk
                let w = r[(m, k)] / n_in as f64;
                if w == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for i in 0..n_out {
                    for j in 0..n_out {
                        let coeff = l[(i, j)] * w;
                        if coeff.norm() > 0.0 {
                            terms.push(EtaTerm {
                                out: (i, j),
                                input: (k, m),
                                coeff,
                            });
                        }
                    }
                }
            }
        }
    }
    EtaMap::from_terms(n_in, n_out, terms)
}

/// `(η₁, η₂)` with `η₁: M_p → M_q` and `η₂: M_q → M_p`.
pub fn build_nonsep_eta(family: &CorrelationFamily) -> Result<(EtaMap, EtaMap)> {
    let eta1 = trace_sum_map(&family.psi_hat, &family.psi)?;
    let eta2 = trace_sum_map(&family.psi, &family.psi_hat)?;
    Ok((eta1, eta2))
}

#[derive(Clone, Debug)]
pub struct FadingSolution {
    /// `𝒢₁(z)`, a `p × p` matrix.
    pub g1: CMat,
    /// `φ(𝒢₁(z))`.
    pub g: Complex64,
    pub solution: CauchySolution,
}

/// Solves the eliminated equation for `𝒢₁` directly.
pub fn solve_fading(family: &CorrelationFamily, z: Complex64, config: &SolverConfig) -> Result<FadingSolution> {
    let (eta1, eta2) = build_nonsep_eta(family)?;
    let solution = solve_eliminated(&eta2, &eta1, z, config, None)?;
    Ok(FadingSolution {
        g1: solution.g.clone(),
        g: normalized_trace(&solution.g),
        solution,
    })
}

/// The law of `HH*` through the two-block hermitization
/// `[[d₁, ·], [·, d₂]] ↦ [[η₂(d₂), 0], [0, η₁(d₁)]]`.
pub fn fading_law(family: &CorrelationFamily) -> Result<Law> {
    let (eta1, eta2) = build_nonsep_eta(family)?;
    Ok(Law::Gram {
        eta: EtaMap::two_block(&eta2, &eta1)?,
        a: family.p(),
        side: GramSide::Upper,
        atoms: (0.0, 0.0),
    })
}

/// Solves through the two-block route and reads `𝒢₁` off the upper block.
pub fn solve_fading_two_block(
    family: &CorrelationFamily,
    z: Complex64,
    config: &SolverConfig,
) -> Result<FadingSolution> {
    let law = fading_law(family)?;
    let point = law.cauchy(z, config, None)?;
    let p = family.p();
    let g1 = point.solution.g.view((0, 0), (p, p)).into_owned() / z.sqrt();
    Ok(FadingSolution {
        g1,
        g: point.g,
        solution: point.solution,
    })
}
