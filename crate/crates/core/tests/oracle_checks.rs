mod common;

use blockspectra::covariance::{isi_covariance, validate_covariance, CovarianceSpec, TauEntry};
use blockspectra::oracle::{ks_distance, nc2_trace_moment, Sampler};
use blockspectra::solver::Law;
use blockspectra::spectrum::{capacity, cdf, compute_density, DensityOptions};
use blockspectra::{Complex64, SolverConfig};
use common::*;

#[test]
fn sample_covariance_matches_sigma() {
    let mut r = rng(51);
    let spec = random_selfadjoint(&mut r, 2, 2);
    let closed = validate_covariance(spec.clone()).unwrap();
    let CovarianceSpec::SelfAdjoint { sigma, .. } = closed.spec() else {
        unreachable!()
    };
    let nn = 500;
    let n = (2 * nn) as f64;
    let x = Sampler::new(&spec).unwrap().sample(nn, 9, 0).unwrap().matrix;
    for e in sigma {
        // E[a⁽ⁱʲ⁾_rp conj a⁽ˡᵏ⁾_rp] = σ(i,j;k,l)/n
        let mut acc = Complex64::new(0.0, 0.0);
        for row in 0..nn {
            for col in 0..nn {
                acc += x[(e.i * nn + row, e.j * nn + col)] * x[(e.l * nn + row, e.k * nn + col)].conj();
            }
        }
        let estimate = acc * n / (nn * nn) as f64;
        assert!(
            (estimate - e.value).norm() <= 0.03,
            "σ({},{};{},{}) = {} estimated as {estimate}",
            e.i,
            e.j,
            e.k,
            e.l,
            e.value
        );
    }
}

#[test]
fn empirical_moments_match_the_pairing_recursion() {
    let mut r = rng(53);
    let spec = random_selfadjoint(&mut r, 3, 2);
    let eta = validate_covariance(spec.clone()).unwrap().eta_map();
    let weights = vec![1.0 / 3.0; 3];
    let sampler = Sampler::new(&spec).unwrap();
    let spectra = sampler.pooled_spectra(150, 4, 4).unwrap();
    for m in [2, 4, 6] {
        let exact = nc2_trace_moment(&eta, &weights, m).unwrap();
        let empirical: f64 = spectra
            .iter()
            .map(|eigs| eigs.iter().map(|l| l.powi(m as i32)).sum::<f64>() / eigs.len() as f64)
            .sum::<f64>()
            / spectra.len() as f64;
        assert!(
            (empirical - exact).abs() <= 0.03 * exact,
            "m = {m}: {empirical} vs {exact}"
        );
    }
}

#[test]
fn ks_distance_shrinks_with_block_size() {
    let spec = isi_covariance(4, 4, None).unwrap();
    let law = Law::from_covariance(&validate_covariance(spec.clone()).unwrap());
    let rep = compute_density(&law, &DensityOptions::default(), &SolverConfig::default()).unwrap();
    let f = cdf(&rep.density);
    let sampler = Sampler::new(&spec).unwrap();
    let ks: Vec<f64> = [25, 50, 100]
        .iter()
        .map(|nn| {
            let pooled: Vec<f64> = sampler.pooled_spectra(*nn, 2, 20).unwrap().concat();
            ks_distance(&pooled, |x| f.eval(x))
        })
        .collect();
    assert!(ks.windows(2).all(|w| w[1] < w[0]), "{ks:?}");
    assert!(ks[2] < 0.02, "{ks:?}");
}

#[test]
fn marchenko_pastur_capacity_matches_a_large_sample() {
    let spec = CovarianceSpec::HhStar {
        a: 1,
        b: 1,
        tau: vec![TauEntry::new(0, 0, 0, 0, 2.0)],
    };
    let law = Law::from_covariance(&validate_covariance(spec.clone()).unwrap());
    let rep = compute_density(&law, &DensityOptions::default(), &SolverConfig::default()).unwrap();
    let eigs = Sampler::new(&spec).unwrap().sample(2000, 1, 0).unwrap().eigenvalues;
    for snr in [0.1, 1.0, 10.0] {
        let asymptotic = capacity(&rep.density, snr).unwrap();
        let mc =
            eigs.iter().map(|l| (snr * l.max(0.0)).ln_1p()).sum::<f64>() / std::f64::consts::LN_2 / eigs.len() as f64;
        assert!(
            (mc - asymptotic).abs() <= 0.02 * asymptotic,
            "snr {snr}: {mc} vs {asymptotic}"
        );
    }
}
