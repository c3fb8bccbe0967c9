//! Decentralized REINFORCE.
//!
//! Each bus runs an independent agent. Per episode the plant produces `H`
//! noisy rollouts; agent `i` sees only its own column of those rollouts
//! (`v_i`, its sampled and executed actions, its cost `c_i`) and forms
//!
//! ```text
//! ĝ_i = (1/H) Σ_h [Σ_t ∇_θ log π(u_{i,t}^h | v_{i,t}^h)] · c_i^h
//! ```
//!
//! with a Gaussian policy `u ~ N(μ_θ(v), σ²)`. The gradient goes through Adam,
//! and safe controller types are projected back onto their slope caps after
//! every update.

use std::collections::BTreeMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bound_opt::LipschitzBounds;
use crate::controller::{Controller, ControllerError, ControllerKind};
use crate::env::{self, CostSpec, EnvError, LocalTrajectory, NoiseSpec, TrajectoryBatch};
use crate::grid_model::FeederNetwork;
use crate::rng;
use crate::stability::{self, StabilityError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("policy noise sigma must be positive for the score function")]
    SigmaZero,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("bounds are not in the stabilizing set (definiteness margin {margin:.3e})")]
    InfeasibleBounds { margin: f64 },
    #[error("non-finite or divergent loss in episode {episode} (bus {bus:?})")]
    NonFiniteLoss { episode: usize, bus: Option<usize> },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub batch: usize,
    pub hidden: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_period: usize,
    pub horizon: usize,
    pub sigma: f64,
    pub cost: CostSpec,
    /// Actuator limits `±ū_i` with `ū_i ~ U[lo, hi]`, drawn once.
    pub action_bound_range: [f64; 2],
    pub init_magnitude: f64,
    /// Master seed for rollouts.
    pub seed: u64,
    pub action_bound_seed: u64,
    pub init_seed: u64,
    pub test_seed: u64,
    pub test_states: usize,
    /// Random states at which the closed-loop spectral radius is checked after
    /// every update of a safe controller type.
    pub safety_states: usize,
    pub safety_seed: u64,
    pub checkpoint_every: usize,
    /// Subtract the batch-mean local cost from each rollout's weight.
    pub baseline: bool,
    /// Weight step `t` by the cost from `t` onward instead of the whole cost.
    pub reward_to_go: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            batch: 500,
            hidden: 20,
            lr: 0.003,
            lr_decay: 0.6,
            lr_period: 100,
            horizon: env::DEFAULT_HORIZON,
            sigma: env::DEFAULT_SIGMA,
            cost: CostSpec::default(),
            action_bound_range: [0.01, 0.05],
            init_magnitude: env::DEFAULT_INIT_MAGNITUDE,
            seed: 0,
            action_bound_seed: 1,
            init_seed: 2,
            test_seed: 3,
            test_states: 100,
            safety_states: 100,
            safety_seed: 4,
            checkpoint_every: 50,
            baseline: false,
            reward_to_go: false,
        }
    }
}

impl TrainConfig {
    /// Where each default comes from: `reported` values are the published
    /// experiment settings, `assumed` ones fill gaps.
    pub fn default_origins() -> BTreeMap<&'static str, &'static str> {
        let reported = [
            "episodes",
            "batch",
            "hidden",
            "lr",
            "lr_decay",
            "lr_period",
            "cost.gamma",
            "action_bound_range",
        ];
        let assumed = [
            "horizon",
            "sigma",
            "cost.voltage_norm",
            "cost.effort_norm",
            "init_magnitude",
            "seed",
            "action_bound_seed",
            "init_seed",
            "test_seed",
            "test_states",
            "safety_states",
            "safety_seed",
            "checkpoint_every",
            "baseline",
            "reward_to_go",
        ];
        reported
            .iter()
            .map(|k| (*k, "reported"))
            .chain(assumed.iter().map(|k| (*k, "assumed")))
            .collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if self.batch == 0 || self.hidden == 0 || self.horizon == 0 || self.lr_period == 0 {
            return bad("batch, hidden, horizon and lr_period must be positive");
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0 && self.lr.is_finite() && self.lr_decay.is_finite()) {
            return bad("lr and lr_decay must be positive");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(TrainError::SigmaZero);
        }
        let [lo, hi] = self.action_bound_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("action_bound_range must satisfy 0 < lo <= hi");
        }
        if !(self.init_magnitude > 0.0 && self.init_magnitude.is_finite()) {
            return bad("init_magnitude must be positive");
        }
        self.cost.validate()?;
        if !self.cost.is_separable() {
            return Err(EnvError::UnsupportedNormCombination.into());
        }
        Ok(())
    }

    /// `lr · decay^⌊step / period⌋`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.lr_decay.powi((step / self.lr_period) as i32)
    }

    /// Per-bus actuator limits `ū_i`.
    pub fn action_bounds(&self, n_buses: usize) -> Vec<f64> {
        let [lo, hi] = self.action_bound_range;
        let mut rng = rng::seeded(self.action_bound_seed);
        (0..n_buses)
            .map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One Adam update (`θ ← θ - lr·m̂/(√v̂ + ε)`), returning the new parameters.
pub fn adam_step(state: &mut AdamState, params: &[f64], grad: &[f64], lr: f64) -> Result<Vec<f64>, TrainError> {
    let n = params.len();
    for len in [grad.len(), state.m.len(), state.v.len()] {
        if len != n {
            return Err(TrainError::ShapeMismatch { expected: n, got: len });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    Ok((0..n)
        .map(|i| {
            let g = grad[i];
            state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
            state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = state.m[i] / c1;
            let v_hat = state.v[i] / c2;
            params[i] - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)
        })
        .collect())
}

/// How each step's score is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreWeighting {
    /// Subtracted from the cost weight.
    pub baseline: f64,
    pub reward_to_go: bool,
}

/// `Σ_t (x_t - μ_θ(v_t))/σ² · ∂μ_θ(v_t)/∂θ · (c - b)` for one local trajectory,
/// where `x_t` is the unclamped action draw.
pub fn score_gradient(
    controller: &Controller,
    local: &LocalTrajectory,
    sigma: f64,
    weighting: ScoreWeighting,
) -> Result<Vec<f64>, TrainError> {
    if !(sigma > 0.0) {
        return Err(TrainError::SigmaZero);
    }
    let mut g = vec![0.0; controller.param_count()];
    let inv_var = 1.0 / (sigma * sigma);
    let mut remaining = local.cost;
    for t in 0..local.v.len() {
        let weight = if weighting.reward_to_go { remaining } else { local.cost } - weighting.baseline;
        remaining -= local.step_costs[t];
        let v = local.v[t];
        let score = (local.sample[t] - controller.eval(v)) * inv_var * weight;
        if score == 0.0 {
            continue;
        }
        for (gi, di) in g.iter_mut().zip(controller.param_gradient(v)) {
            *gi += score * di;
        }
    }
    Ok(g)
}

/// `Σ_t log N(x_t; μ_θ(v_t), σ²) · c`, the objective whose gradient
/// [`score_gradient`] returns when noise samples are held fixed.
pub fn weighted_log_likelihood(controller: &Controller, local: &LocalTrajectory, sigma: f64) -> f64 {
    let norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    local
        .v
        .iter()
        .zip(&local.sample)
        .map(|(&v, &x)| {
            let r = (x - controller.eval(v)) / sigma;
            norm - 0.5 * r * r
        })
        .sum::<f64>()
        * local.cost
}

/// One bus's learner: its controller and optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub bus: usize,
    pub controller: Controller,
    pub adam: AdamState,
}

impl Agent {
    pub fn new(bus: usize, controller: Controller) -> Self {
        let adam = AdamState::new(controller.param_count());
        Self { bus, controller, adam }
    }

    /// Batch-mean score gradient from this bus's local trajectories.
    pub fn gradient(&self, batch: &[LocalTrajectory], config: &TrainConfig) -> Result<Vec<f64>, TrainError> {
        let h = batch.len().max(1) as f64;
        let baseline = if config.baseline {
            batch.iter().map(|l| l.cost).sum::<f64>() / h
        } else {
            0.0
        };
        let weighting = ScoreWeighting {
            baseline,
            reward_to_go: config.reward_to_go,
        };
        let mut g = vec![0.0; self.controller.param_count()];
        for local in batch {
            if local.bus != self.bus {
                return Err(TrainError::ShapeMismatch {
                    expected: self.bus,
                    got: local.bus,
                });
            }
            for (acc, x) in g.iter_mut().zip(score_gradient(&self.controller, local, config.sigma, weighting)?) {
                *acc += x;
            }
        }
        g.iter_mut().for_each(|x| *x /= h);
        Ok(g)
    }

    /// Gradient, Adam step and projection (for capped controller types).
    pub fn update(&mut self, batch: &[LocalTrajectory], lr: f64, config: &TrainConfig) -> Result<(), TrainError> {
        let g = self.gradient(batch, config)?;
        let next = adam_step(&mut self.adam, &self.controller.params(), &g, lr)?;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteLoss {
                episode: self.adam.step as usize - 1,
                bus: Some(self.bus),
            });
        }
        self.controller = self.controller.with_params(&next)?;
        Ok(())
    }
}

/// Initial per-bus controllers for a training run.
pub fn initial_controllers(
    caps: &[f64],
    action_bounds: &[f64],
    config: &TrainConfig,
    kind: ControllerKind,
) -> Vec<Controller> {
    caps.iter()
        .zip(action_bounds)
        .enumerate()
        .map(|(i, (&k, &ub))| {
            Controller::init(kind, config.hidden, k, rng::stream_seed(config.init_seed, i as u64), -ub, ub)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_rollout_total: Vec<f64>,
    /// `[rollout][bus]`; empty when the cost does not split over buses.
    pub per_rollout_bus: Vec<Vec<f64>>,
    pub mean_total: f64,
    pub median_total: f64,
    pub mean_per_bus: Vec<f64>,
    pub diverged: usize,
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Noise-free rollouts from every test state.
pub fn evaluate(
    net: &FeederNetwork,
    controllers: &[Controller],
    test_states: &[Vec<f64>],
    cost: &CostSpec,
    horizon: usize,
) -> Result<Evaluation, TrainError> {
    let batch = TrajectoryBatch::collect(net, controllers, test_states, horizon, NoiseSpec::NONE, 0)?;
    let per_rollout_total: Vec<f64> = batch.rollouts.iter().map(|r| r.total_cost(cost)).collect();
    let per_rollout_bus = if cost.is_separable() {
        batch
            .rollouts
            .iter()
            .map(|r| r.bus_costs(cost))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    let h = per_rollout_total.len().max(1) as f64;
    let mut mean_per_bus = vec![0.0; if per_rollout_bus.is_empty() { 0 } else { net.n_buses() }];
    for row in &per_rollout_bus {
        for (acc, x) in mean_per_bus.iter_mut().zip(row) {
            *acc += x / h;
        }
    }
    Ok(Evaluation {
        mean_total: per_rollout_total.iter().sum::<f64>() / h,
        median_total: median(&per_rollout_total),
        per_rollout_total,
        per_rollout_bus,
        mean_per_bus,
        diverged: batch.rollouts.iter().filter(|r| r.diverged()).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub lr: f64,
    /// Mean over the batch of each bus's cost `c_i`.
    pub mean_batch_cost: Vec<f64>,
    /// Per-bus mean cost on the held-out test states after the update.
    pub test_cost: Vec<f64>,
    pub test_total: f64,
    /// Worst closed-loop spectral radius over the safety states (safe types only).
    pub spectral_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub episodes: Vec<EpisodeRecord>,
    pub initial_test_total: f64,
    pub final_test: Evaluation,
    /// Post-update policies whose certificate failed.
    pub safety_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub controllers: Vec<Controller>,
    pub action_bounds: Vec<f64>,
    pub report: AgentReport,
}

/// Hooks into the training loop. All methods default to no-ops.
pub trait TrainObserver {
    /// Called after the batch is collected, before any agent updates.
    fn batch(&mut self, _episode: usize, _batch: &TrajectoryBatch) {}
    /// Called after every agent has updated (and projected).
    fn updated(&mut self, _record: &EpisodeRecord, _controllers: &[Controller]) {}
    /// Called every `checkpoint_every` episodes and after the last one.
    fn checkpoint(&mut self, _episode: usize, _controllers: &[Controller]) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Worst closed-loop spectral radius at the given states.
pub fn worst_spectral_radius(
    net: &FeederNetwork,
    controllers: &[Controller],
    states: &[Vec<f64>],
) -> Result<f64, TrainError> {
    let radii = states
        .par_iter()
        .map(|v| {
            let slopes: Vec<f64> = controllers.iter().zip(v).map(|(c, &vi)| c.slope_at(vi)).collect();
            stability::closed_loop_spectral_radius(net, &stability::SlopeProfile(slopes), stability::DEFAULT_MARGIN)
                .map(|c| c.spectral_radius)
        })
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(radii.into_iter().fold(0.0, f64::max))
}

/// Whether every controller's slopes stay below its cap and the caps are in the
/// stabilizing set.
pub fn caps_hold(net: &FeederNetwork, controllers: &[Controller]) -> Result<bool, TrainError> {
    let mut caps = Vec::with_capacity(controllers.len());
    for c in controllers {
        let (hi, lo) = c.slope_range();
        match c.slope_cap() {
            Some(k) if hi < k && lo > 0.0 => caps.push(k),
            _ => return Ok(false),
        }
    }
    Ok(stability::in_stabilizing_set(net, &caps)?.feasible)
}

/// Runs the full training loop.
pub fn train(
    net: &FeederNetwork,
    bounds: &LipschitzBounds,
    config: &TrainConfig,
    kind: ControllerKind,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let n = net.n_buses();
    if bounds.k.len() != n {
        return Err(TrainError::ShapeMismatch {
            expected: n,
            got: bounds.k.len(),
        });
    }
    if kind.is_safe() {
        let report = stability::in_stabilizing_set(net, &bounds.k)?;
        if !report.feasible {
            return Err(TrainError::InfeasibleBounds {
                margin: report.definiteness_margin,
            });
        }
    }
    let action_bounds = config.action_bounds(n);
    let mut agents: Vec<Agent> = initial_controllers(&bounds.k, &action_bounds, config, kind)
        .into_iter()
        .enumerate()
        .map(|(i, c)| Agent::new(i, c))
        .collect();
    let snapshot = |agents: &[Agent]| agents.iter().map(|a| a.controller.clone()).collect::<Vec<_>>();

    let test_states = env::sample_initial_states(n, config.test_states, config.init_magnitude, config.test_seed)?;
    let safety_states = env::sample_initial_states(n, config.safety_states, config.init_magnitude, config.safety_seed)?;
    let noise = NoiseSpec { sigma: config.sigma };
    let initial_test_total = evaluate(net, &snapshot(&agents), &test_states, &config.cost, config.horizon)?.mean_total;

    let mut episodes = Vec::with_capacity(config.episodes);
    let mut safety_violations = 0;
    for episode in 0..config.episodes {
        let lr = config.lr_at(episode);
        let controllers = snapshot(&agents);
        let starts = env::sample_initial_states(
            n,
            config.batch,
            config.init_magnitude,
            rng::stream_seed2(config.seed, 0, episode as u64),
        )?;
        let batch = TrajectoryBatch::collect(
            net,
            &controllers,
            &starts,
            config.horizon,
            noise,
            rng::stream_seed2(config.seed, 1, episode as u64),
        )?;
        if batch.first_divergence().is_some() {
            return Err(TrainError::NonFiniteLoss { episode, bus: None });
        }
        observer.batch(episode, &batch);

        let h = batch.len().max(1) as f64;
        let mean_batch_cost = agents
            .par_iter_mut()
            .map(|agent| -> Result<f64, TrainError> {
                let local = batch.local(agent.bus, &config.cost)?;
                let mean_cost = local.iter().map(|l| l.cost).sum::<f64>() / h;
                if !mean_cost.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        episode,
                        bus: Some(agent.bus),
                    });
                }
                agent.update(&local, lr, config)?;
                Ok(mean_cost)
            })
            .collect::<Result<Vec<f64>, _>>()?;

        let controllers = snapshot(&agents);
        let spectral_radius = if kind.is_safe() {
            let rho = worst_spectral_radius(net, &controllers, &safety_states)?;
            if !(rho < 1.0) || !caps_hold(net, &controllers)? {
                safety_violations += 1;
            }
            Some(rho)
        } else {
            None
        };
        let test = evaluate(net, &controllers, &test_states, &config.cost, config.horizon)?;
        let record = EpisodeRecord {
            episode,
            lr,
            mean_batch_cost,
            test_cost: test.mean_per_bus,
            test_total: test.mean_total,
            spectral_radius,
        };
        observer.updated(&record, &controllers);
        let last = episode + 1 == config.episodes;
        if last || (config.checkpoint_every > 0 && (episode + 1) % config.checkpoint_every == 0) {
            observer.checkpoint(episode + 1, &controllers);
        }
        episodes.push(record);
    }

    let controllers = snapshot(&agents);
    let final_test = evaluate(net, &controllers, &test_states, &config.cost, config.horizon)?;
    Ok(TrainOutcome {
        controllers,
        action_bounds,
        report: AgentReport {
            episodes,
            initial_test_total,
            final_test,
            safety_violations,
        },
    })
}
