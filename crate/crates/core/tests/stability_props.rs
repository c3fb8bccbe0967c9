mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use voltgrid::bound_opt::{optimize_bounds, BarrierOptions};
use voltgrid::grid_model::load_matrix;
use voltgrid::linalg::Matrix;
use voltgrid::rng;
use voltgrid::stability::*;
use rand::Rng;

#[test]
fn jacobi_agrees_with_reference_solver() {
    let mut r = rng::seeded(11);
    for n in 1..=12 {
        for _ in 0..20 {
            let a = DMatrix::from_fn(n, n, |_, _| r.random_range(-3.0..3.0));
            let a = (&a + a.transpose()) * 0.5;
            let m = from_na(&a);
            let ours = sym_eigen(&m, true).unwrap();
            let mut reference: Vec<f64> = a.clone().symmetric_eigenvalues().iter().copied().collect();
            reference.sort_by(f64::total_cmp);
            for (x, y) in ours.values.iter().zip(&reference) {
                assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()), "n={n}: {x} vs {y}");
            }
            assert!(ours.residual(&m) <= 1e-9 * m.frobenius_norm().max(1e-300));
        }
    }
}

#[test]
fn diagonal_eigenvalues_exact() {
    let d = [3.5, -1.0, 0.25, 7.0, 2.0];
    let e = sym_eigenvalues(&Matrix::from_diag(&d)).unwrap();
    let mut sorted = d.to_vec();
    sorted.sort_by(f64::total_cmp);
    for (a, b) in e.iter().zip(sorted) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert_eq!(sym_eigenvalues(&Matrix::from_diag(&[2.0, 5.0])).unwrap(), vec![2.0, 5.0]);
}

#[test]
fn similarity_matches_general_solver() {
    let mut r = rng::seeded(5);
    for trial in 0..200 {
        let n = 1 + trial % 8;
        let x = random_pd(&mut r, n);
        let d: Vec<f64> = (0..n).map(|_| r.random_range(0.01..5.0)).collect();
        let sym = sym_eigenvalues(&symmetric_jacobian(&x, &d)).unwrap();
        let general = general_eigen(&closed_loop(&x, &d));
        for ((re, im), s) in general.iter().zip(&sym) {
            assert!(im.abs() < 1e-8, "imaginary part {im}");
            assert!((re - s).abs() < 1e-8, "trial {trial}: {re} vs {s}");
        }
    }
}

#[test]
fn stabilizing_set_examples() {
    let net = three_bus();
    assert!(in_stabilizing_set(&net, &[1.9, 1.9]).unwrap().feasible);
    assert!(!in_stabilizing_set(&net, &[0.0, 1.0]).unwrap().feasible);
    let boundary = in_stabilizing_set(&net, &[11.52, 2.375]).unwrap();
    assert!(!boundary.feasible);
    // Oracle: 2X⁻¹ from the closed-form 2×2 inverse.
    let det: f64 = 0.20 * 0.97 - 0.16 * 0.16;
    assert!((2.0 * 0.97 / det - 11.52).abs() < 0.01);
    assert!((2.0 * 0.20 / det - 2.375).abs() < 0.001);
}

#[test]
fn condition_holds_on_random_instances() {
    let mut r = rng::seeded(17);
    let mut checked = 0;
    for trial in 0..400 {
        let n = 1 + trial % 6;
        let x = random_pd(&mut r, n);
        let dir: Vec<f64> = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
        let t = max_feasible_scale(&x, &dir) * r.random_range(0.5..0.999);
        let k: Vec<f64> = dir.iter().map(|d| d * t).collect();
        let net = load_matrix(x.clone(), None).unwrap();
        assert!(in_stabilizing_set(&net, &k).unwrap().feasible);
        for _ in 0..25 {
            let d: Vec<f64> = k.iter().map(|k| r.random_range(1e-6 * k..k * (1.0 - 1e-6))).collect();
            let rho = oracle_spectral_radius(&closed_loop(&x, &d));
            assert!(rho < 1.0, "counterexample: rho = {rho}");
            let cert = closed_loop_spectral_radius(&net, &SlopeProfile(d), 0.0).unwrap();
            assert!((cert.spectral_radius - rho).abs() < 1e-9);
            checked += 1;
        }
    }
    assert_eq!(checked, 10_000);
}

#[test]
fn feeder_sweep_cross_checked() {
    let net = feeder33();
    let b = optimize_bounds(&net, &vec![1.0; net.n_buses()], &BarrierOptions::default()).unwrap();
    let report = sample_stability_sweep(&net, &b.k, 1000, 3, SweepOptions::default()).unwrap();
    assert_eq!(report.n_violations, 0);
    assert!(report.worst.spectral_radius < 1.0);
    for idx in (0..1000).step_by(50) {
        let d = sweep_sample(&b.k, 3, idx);
        let rho = oracle_spectral_radius(&closed_loop(net.x(), &d.0));
        let cert = closed_loop_spectral_radius(&net, &d, DEFAULT_MARGIN).unwrap();
        assert!((cert.spectral_radius - rho).abs() < 1e-8, "{} vs {rho}", cert.spectral_radius);
    }
    assert!(matches!(
        sample_stability_sweep(&net, &b.k, 0, 3, SweepOptions::default()),
        Err(StabilityError::EmptySweep)
    ));
}

#[test]
fn scaled_bounds_break_stability() {
    let net = feeder33();
    let b = optimize_bounds(&net, &vec![1.0; net.n_buses()], &BarrierOptions::default()).unwrap();
    let k3: Vec<f64> = b.k.iter().map(|k| 3.0 * k).collect();
    assert!(matches!(
        sample_stability_sweep(&net, &k3, 10, 3, SweepOptions::default()),
        Err(StabilityError::InfeasibleBounds { .. })
    ));
    let opts = SweepOptions {
        allow_infeasible: true,
        ..SweepOptions::default()
    };
    let report = sample_stability_sweep(&net, &k3, 200, 3, opts).unwrap();
    assert!(report.n_violations > 0);
    assert!(oracle_spectral_radius(&closed_loop(net.x(), &k3)) >= 1.0);
}

#[test]
fn fallback_radius_matches_reference() {
    let mut r = rng::seeded(23);
    for n in 1..=8 {
        let x = random_pd(&mut r, n);
        let d: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..3.0)).collect();
        let rho = oracle_spectral_radius(&closed_loop(&x, &d));
        let ours = general_spectral_radius_ours(&x, &d);
        assert!((ours - rho).abs() <= 1e-6 * rho.max(1.0), "n={n}: {ours} vs {rho}");
    }
}

fn general_spectral_radius_ours(x: &Matrix, d: &[f64]) -> f64 {
    voltgrid::stability::general_spectral_radius(&jacobian(x, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn certificates_monotone_in_margin(
        d in proptest::collection::vec(0.01f64..20.0, 2),
        m1 in 0.0f64..0.5,
        m2 in 0.0f64..0.5,
    ) {
        let net = three_bus();
        let (lo, hi) = if m1 < m2 { (m1, m2) } else { (m2, m1) };
        let c = closed_loop_spectral_radius(&net, &SlopeProfile(d), hi).unwrap();
        if c.stable {
            prop_assert!(c.with_margin(lo).stable);
        }
        prop_assert!(!c.stable || c.spectral_radius < 1.0);
        let max_abs = c.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
        prop_assert_eq!(max_abs, c.spectral_radius);
    }
}
