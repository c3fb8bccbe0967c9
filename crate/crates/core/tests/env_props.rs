mod common;

use common::*;
use nalgebra::DVector;
use rand::Rng;
use voltgrid::bound_opt::{optimize_bounds, BarrierOptions};
use voltgrid::controller::{Controller, StackedReluController};
use voltgrid::env::*;
use voltgrid::rng;
use voltgrid::stability::spd_inverse;

fn safe_controllers(k: &[f64], limit: f64, seed: u64) -> Vec<Controller> {
    k.iter()
        .enumerate()
        .map(|(i, &k)| Controller::StackedRelu(StackedReluController::init(20, k, rng::stream_seed(seed, i as u64), -limit, limit)))
        .collect()
}

#[test]
fn step_matches_matrix_vector_oracle() {
    let net = feeder33();
    let mut r = rng::seeded(1);
    let n = net.n_buses();
    for _ in 0..50 {
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-0.05..0.05)).collect();
        let u: Vec<f64> = (0..n).map(|_| r.random_range(-0.05..0.05)).collect();
        let next = step(&net, &GridState::from_v(v.clone()), &u).unwrap();
        let oracle = DVector::from_vec(v) - to_na(net.x()) * DVector::from_vec(u);
        for i in 0..n {
            assert!((next.v[i] - oracle[i]).abs() < 1e-15);
        }
    }
}

#[test]
fn bookkeeping_telescopes() {
    let net = feeder33();
    let n = net.n_buses();
    let b = optimize_bounds(&net, &vec![1.0; n], &BarrierOptions::default()).unwrap();
    let ctrls = safe_controllers(&b.k, 0.03, 5);
    let starts = sample_initial_states(n, 20, 0.05, 6).unwrap();
    let x = to_na(net.x());
    for (h, v0) in starts.iter().enumerate() {
        let tr = rollout(&net, &ctrls, v0, 30, NoiseSpec::default(), h as u64).unwrap();
        let mut total_u = DVector::zeros(n);
        for u in &tr.u {
            total_u += DVector::from_column_slice(u);
        }
        let dv = DVector::from_column_slice(&tr.final_state.v) - DVector::from_column_slice(v0);
        let expected = -(&x * &total_u);
        assert!((dv - expected).amax() < 1e-10);
        for i in 0..n {
            assert!((tr.final_state.q[i] + total_u[i]).abs() < 1e-10);
        }
        // Per-rollout totals equal the sum of per-step costs.
        let spec = CostSpec::default();
        let per_bus = tr.bus_costs(&spec).unwrap();
        let direct: f64 = tr.step_costs(&spec).unwrap().iter().flatten().sum();
        assert!((per_bus.iter().sum::<f64>() - direct).abs() < 1e-10);
        assert!((tr.total_cost(&spec) - direct).abs() < 1e-10);
        assert_eq!(tr.len(), 30);
    }
}

#[test]
fn parallel_batch_matches_serial_rollouts() {
    let net = feeder33();
    let n = net.n_buses();
    let b = optimize_bounds(&net, &vec![1.0; n], &BarrierOptions::default()).unwrap();
    let ctrls = safe_controllers(&b.k, 0.03, 7);
    let starts = sample_initial_states(n, 16, 0.05, 8).unwrap();
    let batch = TrajectoryBatch::collect(&net, &ctrls, &starts, 10, NoiseSpec::default(), 99).unwrap();
    for (h, v0) in starts.iter().enumerate() {
        let serial = rollout(&net, &ctrls, v0, 10, NoiseSpec::default(), rng::stream_seed(99, h as u64)).unwrap();
        assert_eq!(batch.rollouts[h], serial);
    }
}

#[test]
fn initial_state_mean_is_centred() {
    let n = 4;
    let count = 10_000;
    let a = 0.05;
    let s = sample_initial_states(n, count, a, 10).unwrap();
    // Std of the sample mean of U[-a, a] is a/√3/√count.
    let sd = a / 3f64.sqrt() / (count as f64).sqrt();
    for i in 0..n {
        let mean = s.iter().map(|v| v[i]).sum::<f64>() / count as f64;
        assert!(mean.abs() < 3.0 * sd, "bus {i}: {mean}");
    }
}

fn energy(xinv: &nalgebra::DMatrix<f64>, v: &[f64]) -> f64 {
    let v = DVector::from_column_slice(v);
    (v.transpose() * xinv * &v)[(0, 0)]
}

/// With `u = D̄ v` (secant slopes `0 ≤ D̄ ≺ diag(k) ≺ 2X⁻¹`), the energy
/// `V = vᵀX⁻¹v` satisfies `V' = V - uᵀ(2D̄⁻¹ - X)u < V`, saturated or not.
#[test]
fn safe_closed_loop_energy_strictly_decreases() {
    let net = feeder33();
    let n = net.n_buses();
    let b = optimize_bounds(&net, &vec![1.0; n], &BarrierOptions::default()).unwrap();
    let xinv = to_na(&spd_inverse(net.x()).unwrap());
    for limit in [0.03, 1e6] {
        let ctrls = safe_controllers(&b.k, limit, 11);
        for v0 in sample_initial_states(n, 25, 0.05, 12).unwrap() {
            let tr = rollout(&net, &ctrls, &v0, 30, NoiseSpec::NONE, 0).unwrap();
            let states: Vec<&[f64]> = tr.states().collect();
            for w in states.windows(2) {
                assert!(energy(&xinv, w[1]) < energy(&xinv, w[0]));
            }
        }
    }
}

#[test]
fn scalar_feeder_decays_geometrically_in_two_norm() {
    let net = voltgrid::grid_model::load_matrix(voltgrid::linalg::Matrix::from_rows(&[vec![0.5]]).unwrap(), None).unwrap();
    let ctrl = vec![Controller::StackedRelu(StackedReluController::init(3, 3.0, 1, -10.0, 10.0))];
    let tr = rollout(&net, &ctrl, &[0.04], 30, NoiseSpec::NONE, 0).unwrap();
    let states: Vec<&[f64]> = tr.states().collect();
    for w in states.windows(2) {
        assert!(w[1][0].abs() < w[0][0].abs());
    }
}
