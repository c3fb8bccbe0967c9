//! Closed-loop plant: `v_{t+1} = v_t - X u_t`, `q_{t+1} = q_t - u_t`.
//!
//! Active power only enters through the initial deviation `v₀`. Actions are
//! the controller output plus Gaussian noise, clamped to the actuator limits.

use std::io::Write;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::Controller;
use crate::grid_model::FeederNetwork;
use crate::rng;

pub const DEFAULT_HORIZON: usize = 30;
pub const DEFAULT_SIGMA: f64 = 0.005;
pub const DEFAULT_INIT_MAGNITUDE: f64 = 0.05;
pub const DEFAULT_GAMMA: f64 = 0.01;
/// Rollouts stop once any `|v_i|` exceeds this many p.u.
pub const DIVERGENCE_GUARD: f64 = 1e3;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("infinity-norm voltage cost has no per-bus decomposition")]
    UnsupportedNormCombination,
    #[error("invalid cost weight gamma = {0}")]
    InvalidGamma(f64),
    #[error("initial-state magnitude must be positive, got {0}")]
    InvalidMagnitude(f64),
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridState {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub t: usize,
}

impl GridState {
    /// State with the given deviation and zero reactive power.
    pub fn from_v(v: Vec<f64>) -> Self {
        let q = vec![0.0; v.len()];
        Self { v, q, t: 0 }
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), EnvError> {
    if expected == got {
        Ok(())
    } else {
        Err(EnvError::DimensionMismatch { what, expected, got })
    }
}

fn advance(x: &[f64], state: &mut GridState, u: &[f64]) {
    let n = u.len();
    for i in 0..n {
        let row = &x[i * n..(i + 1) * n];
        state.v[i] -= row.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
        state.q[i] -= u[i];
    }
    state.t += 1;
}

/// One step of the reduced dynamics.
pub fn step(net: &FeederNetwork, state: &GridState, u: &[f64]) -> Result<GridState, EnvError> {
    let n = net.n_buses();
    check_len("voltage", n, state.v.len())?;
    check_len("reactive power", n, state.q.len())?;
    check_len("action", n, u.len())?;
    let mut next = state.clone();
    advance(net.x().as_slice(), &mut next, u);
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
}

impl NoiseSpec {
    pub const NONE: Self = Self { sigma: 0.0 };
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma: DEFAULT_SIGMA }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoltageNorm {
    One,
    /// Squared Euclidean norm, so that it splits over buses.
    Two,
    Infinity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffortNorm {
    One,
    /// Squared Euclidean norm.
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostSpec {
    pub voltage_norm: VoltageNorm,
    pub effort_norm: EffortNorm,
    pub gamma: f64,
}

impl Default for CostSpec {
    fn default() -> Self {
        Self {
            voltage_norm: VoltageNorm::One,
            effort_norm: EffortNorm::One,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl CostSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.gamma >= 0.0 && self.gamma.is_finite() {
            Ok(())
        } else {
            Err(EnvError::InvalidGamma(self.gamma))
        }
    }

    pub fn is_separable(&self) -> bool {
        self.voltage_norm != VoltageNorm::Infinity
    }

    fn effort(&self, u: f64) -> f64 {
        match self.effort_norm {
            EffortNorm::One => u.abs(),
            EffortNorm::Two => u * u,
        }
    }

    /// Cost of one bus at one step.
    pub fn bus_step(&self, v: f64, u: f64) -> Result<f64, EnvError> {
        let volt = match self.voltage_norm {
            VoltageNorm::One => v.abs(),
            VoltageNorm::Two => v * v,
            VoltageNorm::Infinity => return Err(EnvError::UnsupportedNormCombination),
        };
        Ok(volt + self.gamma * self.effort(u))
    }

    /// Network-wide cost of one step.
    pub fn total_step(&self, v: &[f64], u: &[f64]) -> f64 {
        let volt = match self.voltage_norm {
            VoltageNorm::One => v.iter().map(|x| x.abs()).sum(),
            VoltageNorm::Two => v.iter().map(|x| x * x).sum(),
            VoltageNorm::Infinity => v.iter().fold(0.0, |m: f64, x| m.max(x.abs())),
        };
        volt + self.gamma * u.iter().map(|&x| self.effort(x)).sum::<f64>()
    }
}

/// One closed-loop rollout. Row `t` of each table holds the values at the
/// state the action was computed from (`v_t`, `t = 0..T-1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub sigma: f64,
    pub v: Vec<Vec<f64>>,
    /// Controller output `μ_i(v_i)`.
    pub mean: Vec<Vec<f64>>,
    /// Unclamped draw `μ + σξ`.
    pub sample: Vec<Vec<f64>>,
    /// Executed (clamped) action.
    pub u: Vec<Vec<f64>>,
    pub initial: GridState,
    pub final_state: GridState,
    /// Step at which the divergence guard fired, if it did.
    pub diverged_at: Option<usize>,
}

/// Everything a single bus agent may observe about one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTrajectory {
    pub bus: usize,
    pub v: Vec<f64>,
    pub sample: Vec<f64>,
    pub u: Vec<f64>,
    pub step_costs: Vec<f64>,
    pub cost: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn n_buses(&self) -> usize {
        self.initial.v.len()
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// All recorded states followed by the final one.
    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.v
            .iter()
            .map(Vec::as_slice)
            .chain(std::iter::once(self.final_state.v.as_slice()))
    }

    /// Per-step, per-bus costs `[t][bus]`.
    pub fn step_costs(&self, spec: &CostSpec) -> Result<Vec<Vec<f64>>, EnvError> {
        self.v
            .iter()
            .zip(&self.u)
            .map(|(v, u)| v.iter().zip(u).map(|(&v, &u)| spec.bus_step(v, u)).collect())
            .collect()
    }

    /// `c_i = Σ_t C_i(v_{i,t}, u_{i,t})`.
    pub fn bus_costs(&self, spec: &CostSpec) -> Result<Vec<f64>, EnvError> {
        let mut c = vec![0.0; self.n_buses()];
        for row in self.step_costs(spec)? {
            for (acc, x) in c.iter_mut().zip(row) {
                *acc += x;
            }
        }
        Ok(c)
    }

    pub fn total_cost(&self, spec: &CostSpec) -> f64 {
        self.v.iter().zip(&self.u).map(|(v, u)| spec.total_step(v, u)).sum()
    }

    pub fn local(&self, bus: usize, spec: &CostSpec) -> Result<LocalTrajectory, EnvError> {
        let column = |table: &[Vec<f64>]| table.iter().map(|row| row[bus]).collect::<Vec<f64>>();
        let v = column(&self.v);
        let u = column(&self.u);
        let step_costs = v
            .iter()
            .zip(&u)
            .map(|(&v, &u)| spec.bus_step(v, u))
            .collect::<Result<Vec<f64>, _>>()?;
        let cost = step_costs.iter().sum();
        Ok(LocalTrajectory {
            bus,
            v,
            sample: column(&self.sample),
            u,
            step_costs,
            cost,
        })
    }

    /// CSV with columns `t,bus,v,u,cost_step`.
    pub fn write_csv<W: Write>(&self, out: W, spec: &CostSpec) -> Result<(), EnvError> {
        let costs = self.step_costs(spec)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "bus", "v", "u", "cost_step"])?;
        for (t, ((v, u), c)) in self.v.iter().zip(&self.u).zip(&costs).enumerate() {
            for bus in 0..v.len() {
                w.write_record([
                    t.to_string(),
                    bus.to_string(),
                    v[bus].to_string(),
                    u[bus].to_string(),
                    c[bus].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs one rollout of `horizon` steps from `v0` (with `q₀ = 0`).
pub fn rollout(
    net: &FeederNetwork,
    controllers: &[Controller],
    v0: &[f64],
    horizon: usize,
    noise: NoiseSpec,
    seed: u64,
) -> Result<Trajectory, EnvError> {
    let n = net.n_buses();
    check_len("controllers", n, controllers.len())?;
    check_len("initial state", n, v0.len())?;
    if horizon == 0 {
        return Err(EnvError::EmptyHorizon);
    }
    let x = net.x().as_slice();
    let mut rng = rng::seeded(seed);
    let initial = GridState::from_v(v0.to_vec());
    let mut state = initial.clone();
    let mut traj = Trajectory {
        seed,
        sigma: noise.sigma,
        v: Vec::with_capacity(horizon),
        mean: Vec::with_capacity(horizon),
        sample: Vec::with_capacity(horizon),
        u: Vec::with_capacity(horizon),
        initial,
        final_state: state.clone(),
        diverged_at: None,
    };
    for t in 0..horizon {
        let mean: Vec<f64> = controllers.iter().zip(&state.v).map(|(c, &v)| c.eval(v)).collect();
        let sample: Vec<f64> = if noise.sigma > 0.0 {
            mean.iter()
                .map(|&m| m + noise.sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()
        } else {
            mean.clone()
        };
        let u: Vec<f64> = sample
            .iter()
            .zip(controllers)
            .map(|(&s, c)| {
                let (lo, hi) = c.limits();
                s.clamp(lo, hi)
            })
            .collect();
        traj.v.push(state.v.clone());
        advance(x, &mut state, &u);
        traj.mean.push(mean);
        traj.sample.push(sample);
        traj.u.push(u);
        if state.v.iter().any(|v| !(v.abs() <= DIVERGENCE_GUARD)) {
            traj.diverged_at = Some(t + 1);
            break;
        }
    }
    traj.final_state = state;
    Ok(traj)
}

/// `H` rollouts; rollout `h` uses the stream `stream_seed(master_seed, h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub rollouts: Vec<Trajectory>,
}

impl TrajectoryBatch {
    pub fn collect(
        net: &FeederNetwork,
        controllers: &[Controller],
        initial_states: &[Vec<f64>],
        horizon: usize,
        noise: NoiseSpec,
        master_seed: u64,
    ) -> Result<Self, EnvError> {
        let rollouts = initial_states
            .par_iter()
            .enumerate()
            .map(|(h, v0)| {
                rollout(net, controllers, v0, horizon, noise, rng::stream_seed(master_seed, h as u64))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { rollouts })
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    /// First diverged rollout, if any.
    pub fn first_divergence(&self) -> Option<usize> {
        self.rollouts.iter().position(Trajectory::diverged)
    }

    /// Bus `i`'s view of every rollout.
    pub fn local(&self, bus: usize, spec: &CostSpec) -> Result<Vec<LocalTrajectory>, EnvError> {
        self.rollouts.iter().map(|r| r.local(bus, spec)).collect()
    }
}

/// `n` initial deviations with entries uniform in `[-magnitude, magnitude]`.
pub fn sample_initial_states(
    n_buses: usize,
    n: usize,
    magnitude: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>, EnvError> {
    if !(magnitude > 0.0 && magnitude.is_finite()) {
        return Err(EnvError::InvalidMagnitude(magnitude));
    }
    let mut rng = rng::seeded(seed);
    Ok((0..n)
        .map(|_| {
            (0..n_buses)
                .map(|_| rng.random_range(-magnitude..=magnitude))
                .collect()
        })
        .collect())
}
