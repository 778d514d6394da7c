mod common;

use blockspectra::covariance::{isi_covariance, validate_covariance, CovarianceSpec};
use blockspectra::linalg::{c, identity};
use blockspectra::solver::{
    newton_refine, solve_fixed_point, solve_grid, solve_hh_star, solve_hh_star_direct, POSITIVITY_TOL,
};
use blockspectra::SolverConfig;
use common::*;
use rand::Rng;

fn fixed_point_only() -> SolverConfig {
    SolverConfig {
        newton: false,
        ..SolverConfig::default()
    }
}

#[test]
fn fixed_point_and_newton_agree() {
    let mut r = rng(21);
    for case in 0..50 {
        let d = 1 + case % 4;
        let cov = validate_covariance(random_selfadjoint(&mut r, d, 1 + case % 2)).unwrap();
        let eta = cov.eta_map();
        let z = c(r.random_range(-3.0..3.0), r.random_range(0.1..2.0));
        let fp = solve_fixed_point(&eta, z, &fixed_point_only(), None).unwrap();
        let start = &fp.g + random_matrix(&mut r, d, d) * c(1e-4, 0.0);
        let nt = newton_refine(&eta, z, &start, &SolverConfig::default()).unwrap();
        assert!(fp.converged && nt.converged, "case {case}");
        assert!(
            max_diff(&fp.g, &nt.g) <= 1e-8,
            "case {case}: {}",
            max_diff(&fp.g, &nt.g)
        );
        assert!(fp.positivity <= POSITIVITY_TOL && nt.positivity <= POSITIVITY_TOL);
    }
}

#[test]
fn resolvent_normalization_at_large_z() {
    let mut r = rng(3);
    for d in 1..5 {
        let eta = validate_covariance(random_selfadjoint(&mut r, d, 2)).unwrap().eta_map();
        let z = c(0.0, 1e6);
        let sol = solve_fixed_point(&eta, z, &SolverConfig::default(), None).unwrap();
        assert!(max_diff(&(&sol.g * z), &identity(d)) <= 1e-6);
    }
}

#[test]
fn hermitized_and_direct_routes_agree_on_isi() {
    let spec = isi_covariance(4, 4, None).unwrap();
    for z in [c(0.3, 0.01), c(0.8, 0.05), c(1.5, 0.001), c(-0.2, 0.1), c(2.5, 1e-3)] {
        let h = solve_hh_star(&spec, z, &SolverConfig::default()).unwrap();
        let e = solve_hh_star_direct(&spec, z, &SolverConfig::default()).unwrap();
        assert!(max_diff(&h.g1, &e.g1) <= 1e-9, "z = {z}: {}", max_diff(&h.g1, &e.g1));
        assert!(max_diff(&h.g2, &e.g2) <= 1e-9, "z = {z}");
        assert!(h.positivity <= POSITIVITY_TOL && e.positivity <= POSITIVITY_TOL);
    }
}

#[test]
fn isi_solution_is_diagonal_and_mirror_symmetric() {
    for k in 2..=5 {
        for l in 1..=4 {
            let spec = isi_covariance(k, l, None).unwrap();
            for z in [c(0.4, 0.02), c(1.0, 0.2)] {
                let s = solve_hh_star(&spec, z, &SolverConfig::default()).unwrap();
                for i in 0..k {
                    for j in 0..k {
                        if i != j {
                            assert!(s.g1[(i, j)].norm() <= 1e-12, "K={k} L={l}");
                        }
                    }
                    assert!(
                        (s.g1[(i, i)] - s.g1[(k - 1 - i, k - 1 - i)]).norm() <= 1e-10,
                        "K={k} L={l}"
                    );
                }
                let b = k + l - 1;
                for j in 0..b {
                    assert!((s.g2[(j, j)] - s.g2[(b - 1 - j, b - 1 - j)]).norm() <= 1e-10);
                }
            }
        }
    }
}

#[test]
fn equal_weights_reproduce_square_blocks() {
    let mut r = rng(8);
    for d in 2..5 {
        let CovarianceSpec::SelfAdjoint { sigma, .. } = random_selfadjoint(&mut r, d, 2) else {
            unreachable!()
        };
        let square = validate_covariance(CovarianceSpec::SelfAdjoint {
            d,
            sigma: sigma.clone(),
        })
        .unwrap();
        let rect = validate_covariance(CovarianceSpec::Rectangular {
            alpha: vec![1.0 / d as f64; d],
            sigma,
        })
        .unwrap();
        for z in [c(0.5, 0.1), c(-1.0, 0.01), c(2.0, 1.0)] {
            let a = solve_fixed_point(&square.eta_map(), z, &SolverConfig::default(), None).unwrap();
            let b = solve_fixed_point(&rect.eta_map(), z, &SolverConfig::default(), None).unwrap();
            assert!(max_diff(&a.g, &b.g) <= 1e-12);
        }
    }
}

#[test]
fn grid_solutions_select_the_negative_branch() {
    let mut r = rng(17);
    for d in 1..4 {
        let eta = validate_covariance(random_selfadjoint(&mut r, d, 2)).unwrap().eta_map();
        let xs: Vec<f64> = (0..80).map(|i| -4.0 + 0.1 * i as f64).collect();
        let sols = solve_grid(&eta, &xs, 1e-3, &SolverConfig::default()).unwrap();
        for s in &sols {
            assert!(s.converged && s.residual <= 1e-10);
            assert!(s.positivity <= POSITIVITY_TOL, "positivity {}", s.positivity);
        }
    }
}
