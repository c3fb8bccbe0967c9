//! Per-bus voltage controllers.
//!
//! The safe controller is a stacked-ReLU network
//!
//! ```text
//! u(v) = Σ_j s_j ReLU(v + b_j) + Σ_j z_j ReLU(-v + d_j)
//! ```
//!
//! with `b_1 = d_1 = 0` and nonincreasing biases, so unit `l` of the positive
//! branch switches on at `v = -b_l ≥ 0` and unit `l` of the negative branch at
//! `v = d_l ≤ 0`. On each linear piece the slope is a partial sum of `s` (for
//! `v > 0`) or of `-z` (for `v < 0`); keeping every partial sum inside
//! `(0, k)` makes `u` monotone, sign-preserving and `k`-Lipschitz. Outputs are
//! clamped to `[u_min, u_max]`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Projection keeps partial sums `PROJECTION_EPS_REL·k` away from `0` and `k`.
pub const PROJECTION_EPS_REL: f64 = 1e-3;
/// Half-width of the voltage range over which initial breakpoints are spread.
pub const DEFAULT_BIAS_RANGE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("controller invariant violated: {0}")]
    InvariantViolated(String),
    #[error("expected {expected} parameters, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid saturation limits [{u_min}, {u_max}]")]
    BadLimits { u_min: f64, u_max: f64 },
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Subgradient convention: `ReLU'(0) = 0`.
#[inline]
fn active(x: f64) -> bool {
    x > 0.0
}

fn check_limits(u_min: f64, u_max: f64) -> Result<(), ControllerError> {
    if u_min <= 0.0 && u_max >= 0.0 && u_min < u_max {
        Ok(())
    } else {
        Err(ControllerError::BadLimits { u_min, u_max })
    }
}

fn finite_or_zero(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x
    }
}

/// Maximum and minimum piece slopes of a piecewise-linear function with the
/// given breakpoints, evaluating `slope` inside every interval.
fn slope_extremes(mut breakpoints: Vec<f64>, slope: impl Fn(f64) -> f64) -> (f64, f64) {
    breakpoints.retain(|b| b.is_finite());
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup();
    let mut probes = Vec::with_capacity(breakpoints.len() + 1);
    match (breakpoints.first(), breakpoints.last()) {
        (Some(&lo), Some(&hi)) => {
            probes.push(lo - 1.0);
            probes.extend(breakpoints.windows(2).map(|w| 0.5 * (w[0] + w[1])));
            probes.push(hi + 1.0);
        }
        _ => probes.push(0.0),
    }
    probes.iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(mx, mn), &v| {
        let s = slope(v);
        (mx.max(s), mn.min(s))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedReluController {
    /// Slope cap.
    pub k: f64,
    pub s: Vec<f64>,
    pub b: Vec<f64>,
    pub z: Vec<f64>,
    pub d: Vec<f64>,
    pub u_min: f64,
    pub u_max: f64,
}

impl StackedReluController {
    /// Builds a controller from explicit weights, rejecting any that break the
    /// stacked-ReLU constraints.
    pub fn new(
        k: f64,
        s: Vec<f64>,
        b: Vec<f64>,
        z: Vec<f64>,
        d: Vec<f64>,
        u_min: f64,
        u_max: f64,
    ) -> Result<Self, ControllerError> {
        let c = Self {
            k,
            s,
            b,
            z,
            d,
            u_min,
            u_max,
        };
        c.check_invariants()?;
        Ok(c)
    }

    pub fn hidden_units(&self) -> usize {
        self.s.len()
    }

    pub fn projection_eps(&self) -> f64 {
        PROJECTION_EPS_REL * self.k
    }

    /// Checks the strict partial-sum and bias-ordering constraints.
    pub fn check_invariants(&self) -> Result<(), ControllerError> {
        let m = self.s.len();
        if m == 0 || [self.b.len(), self.z.len(), self.d.len()] != [m, m, m] {
            return Err(ControllerError::InvariantViolated(format!(
                "inconsistent widths s={}, b={}, z={}, d={}",
                m,
                self.b.len(),
                self.z.len(),
                self.d.len()
            )));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(ControllerError::InvariantViolated(format!("cap k = {}", self.k)));
        }
        check_limits(self.u_min, self.u_max)?;
        let mut ps = 0.0;
        let mut pz = 0.0;
        for l in 0..m {
            ps += self.s[l];
            pz += self.z[l];
            if !(ps > 0.0 && ps < self.k) {
                return Err(ControllerError::InvariantViolated(format!(
                    "partial sum of s up to unit {} is {ps}, outside (0, {})",
                    l + 1,
                    self.k
                )));
            }
            if !(pz < 0.0 && pz > -self.k) {
                return Err(ControllerError::InvariantViolated(format!(
                    "partial sum of z up to unit {} is {pz}, outside ({}, 0)",
                    l + 1,
                    -self.k
                )));
            }
        }
        if self.b[0] != 0.0 || self.d[0] != 0.0 {
            return Err(ControllerError::InvariantViolated(
                "first biases must be zero".into(),
            ));
        }
        if self.b.windows(2).any(|w| !(w[1] <= w[0])) || self.d.windows(2).any(|w| !(w[1] <= w[0])) {
            return Err(ControllerError::InvariantViolated(
                "biases must be nonincreasing".into(),
            ));
        }
        Ok(())
    }

    /// Projects arbitrary parameters onto the constraint set.
    ///
    /// Biases: `b_1 = 0`, then a running minimum (same for `d`). Weights:
    /// partial sums of `s` are clipped into `[ε, k - ε]` from the first unit
    /// onward, adjusting each `s_l` to hit its clipped partial sum (mirrored
    /// into `[-k + ε, -ε]` for `z`), with `ε = 1e-3·k`.
    pub fn project(
        k: f64,
        s: &[f64],
        b: &[f64],
        z: &[f64],
        d: &[f64],
        u_min: f64,
        u_max: f64,
    ) -> Self {
        let eps = PROJECTION_EPS_REL * k;
        let clip_sums = |w: &[f64], lo: f64, hi: f64| -> Vec<f64> {
            let mut total = 0.0;
            w.iter()
                .map(|&x| {
                    let target = (total + finite_or_zero(x)).clamp(lo, hi);
                    let step = target - total;
                    total = target;
                    step
                })
                .collect()
        };
        let order = |w: &[f64]| -> Vec<f64> {
            let mut prev = 0.0;
            w.iter()
                .enumerate()
                .map(|(l, &x)| {
                    let x = if l == 0 { 0.0 } else { finite_or_zero(x).min(prev) };
                    prev = x;
                    x
                })
                .collect()
        };
        Self {
            k,
            s: clip_sums(s, eps, k - eps),
            b: order(b),
            z: clip_sums(z, -k + eps, -eps),
            d: order(d),
            u_min,
            u_max,
        }
    }

    /// Feasible starting point: total slope about `k/2` on each side, split
    /// over the units with ±10% jitter, breakpoints evenly spaced over
    /// `[0, 0.1)` and `(-0.1, 0]` p.u.
    pub fn init(m: usize, k: f64, seed: u64, u_min: f64, u_max: f64) -> Self {
        assert!(m >= 1 && k > 0.0, "init needs m >= 1 and k > 0");
        let mut rng = rng::seeded(seed);
        let unit = 0.5 * k / m as f64;
        let mut jitter = || 1.0 + 0.1 * (2.0 * rng.random::<f64>() - 1.0);
        let s: Vec<f64> = (0..m).map(|_| unit * jitter()).collect();
        let z: Vec<f64> = (0..m).map(|_| -unit * jitter()).collect();
        let spacing = DEFAULT_BIAS_RANGE / m as f64;
        let bias: Vec<f64> = (0..m).map(|l| -(l as f64) * spacing).collect();
        Self::project(k, &s, &bias, &z, &bias, u_min, u_max)
    }

    /// Network output before saturation.
    pub fn raw(&self, v: f64) -> f64 {
        let pos: f64 = self.s.iter().zip(&self.b).map(|(s, b)| s * relu(v + b)).sum();
        let neg: f64 = self.z.iter().zip(&self.d).map(|(z, d)| z * relu(-v + d)).sum();
        pos + neg
    }

    pub fn eval(&self, v: f64) -> f64 {
        self.raw(v).clamp(self.u_min, self.u_max)
    }

    /// Slope of the linear piece containing `v` (saturation ignored).
    pub fn slope_at(&self, v: f64) -> f64 {
        let pos: f64 = self
            .s
            .iter()
            .zip(&self.b)
            .filter(|(_, b)| active(v + **b))
            .map(|(s, _)| s)
            .sum();
        let neg: f64 = self
            .z
            .iter()
            .zip(&self.d)
            .filter(|(_, d)| active(-v + **d))
            .map(|(z, _)| z)
            .sum();
        pos - neg
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        self.b.iter().map(|b| -b).chain(self.d.iter().copied()).collect()
    }

    /// Largest piece slope over all breakpoint intervals.
    pub fn max_slope(&self) -> f64 {
        slope_extremes(self.breakpoints(), |v| self.slope_at(v)).0
    }

    pub fn min_slope(&self) -> f64 {
        slope_extremes(self.breakpoints(), |v| self.slope_at(v)).1
    }

    /// Flattened parameters `[s, b, z, d]`.
    pub fn params(&self) -> Vec<f64> {
        [&self.s[..], &self.b, &self.z, &self.d].concat()
    }

    /// `∂u/∂[s, b, z, d]` at `v`; zero while the output is clamped.
    pub fn param_gradient(&self, v: f64) -> Vec<f64> {
        let m = self.hidden_units();
        let mut g = vec![0.0; 4 * m];
        let raw = self.raw(v);
        if raw > self.u_max || raw < self.u_min {
            return g;
        }
        for j in 0..m {
            let a = v + self.b[j];
            if active(a) {
                g[j] = a;
                g[m + j] = self.s[j];
            }
            let c = -v + self.d[j];
            if active(c) {
                g[2 * m + j] = c;
                g[3 * m + j] = self.z[j];
            }
        }
        g
    }
}

/// `u = clamp(c·v)`, the conventional droop law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearController {
    /// Slope cap; `None` leaves the gain unconstrained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    pub c: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl LinearController {
    /// Gain clipped into `[ε, k - ε]` when capped.
    pub fn project(k: Option<f64>, c: f64, u_min: f64, u_max: f64) -> Self {
        let c = finite_or_zero(c);
        let c = match k {
            Some(k) => {
                let eps = PROJECTION_EPS_REL * k;
                c.clamp(eps, k - eps)
            }
            None => c,
        };
        Self { k, c, u_min, u_max }
    }

    pub fn raw(&self, v: f64) -> f64 {
        self.c * v
    }

    pub fn eval(&self, v: f64) -> f64 {
        self.raw(v).clamp(self.u_min, self.u_max)
    }

    pub fn param_gradient(&self, v: f64) -> Vec<f64> {
        let raw = self.raw(v);
        if raw > self.u_max || raw < self.u_min {
            vec![0.0]
        } else {
            vec![v]
        }
    }
}

/// One-hidden-layer ReLU network with free weights:
/// `u = Σ_j a_j ReLU(w_j v + c_j) + e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnconstrainedMlp {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl UnconstrainedMlp {
    /// Random start that is roughly increasing with total slope near `scale`.
    pub fn init(m: usize, scale: f64, seed: u64, u_min: f64, u_max: f64) -> Self {
        assert!(m >= 1);
        let mut rng = rng::seeded(seed);
        let mut w1 = Vec::with_capacity(m);
        let mut b1 = Vec::with_capacity(m);
        let mut w2 = Vec::with_capacity(m);
        for j in 0..m {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            w1.push(sign);
            b1.push(DEFAULT_BIAS_RANGE * (2.0 * rng.random::<f64>() - 1.0));
            w2.push(sign * scale / m as f64 * (1.0 + 0.5 * (2.0 * rng.random::<f64>() - 1.0)));
        }
        Self {
            w1,
            b1,
            w2,
            b2: 0.0,
            u_min,
            u_max,
        }
    }

    /// Network behaving like `u = gain·v` near the origin.
    pub fn high_gain(gain: f64, u_min: f64, u_max: f64) -> Self {
        Self {
            w1: vec![1.0, -1.0],
            b1: vec![0.0, 0.0],
            w2: vec![gain, -gain],
            b2: 0.0,
            u_min,
            u_max,
        }
    }

    pub fn hidden_units(&self) -> usize {
        self.w1.len()
    }

    pub fn raw(&self, v: f64) -> f64 {
        self.w1
            .iter()
            .zip(&self.b1)
            .zip(&self.w2)
            .map(|((w, b), a)| a * relu(w * v + b))
            .sum::<f64>()
            + self.b2
    }

    pub fn eval(&self, v: f64) -> f64 {
        self.raw(v).clamp(self.u_min, self.u_max)
    }

    pub fn slope_at(&self, v: f64) -> f64 {
        self.w1
            .iter()
            .zip(&self.b1)
            .zip(&self.w2)
            .filter(|((w, b), _)| active(**w * v + **b))
            .map(|((w, _), a)| a * w)
            .sum()
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        self.w1
            .iter()
            .zip(&self.b1)
            .filter(|(w, _)| **w != 0.0)
            .map(|(w, b)| -b / w)
            .collect()
    }

    /// Flattened parameters `[w1, b1, w2, b2]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = [&self.w1[..], &self.b1, &self.w2].concat();
        p.push(self.b2);
        p
    }

    pub fn param_gradient(&self, v: f64) -> Vec<f64> {
        let m = self.hidden_units();
        let mut g = vec![0.0; 3 * m + 1];
        let raw = self.raw(v);
        if raw > self.u_max || raw < self.u_min {
            return g;
        }
        for j in 0..m {
            let pre = self.w1[j] * v + self.b1[j];
            if active(pre) {
                g[j] = self.w2[j] * v;
                g[m + j] = self.w2[j];
                g[2 * m + j] = pre;
            }
        }
        g[3 * m] = 1.0;
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    StackedRelu,
    Linear,
    /// Linear gain with no slope cap.
    LinearUnconstrained,
    Mlp,
}

impl ControllerKind {
    /// Whether every update is projected back onto the stabilizing caps.
    pub fn is_safe(self) -> bool {
        matches!(self, Self::StackedRelu | Self::Linear)
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stacked_relu" => Ok(Self::StackedRelu),
            "linear" => Ok(Self::Linear),
            "linear_unconstrained" => Ok(Self::LinearUnconstrained),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!("unknown controller type `{other}`")),
        }
    }
}

/// Any per-bus controller; serialises with a `"type"` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Controller {
    StackedRelu(StackedReluController),
    Linear(LinearController),
    Mlp(UnconstrainedMlp),
}

impl Controller {
    /// Starting controller for bus-level training.
    pub fn init(kind: ControllerKind, m: usize, k: f64, seed: u64, u_min: f64, u_max: f64) -> Self {
        match kind {
            ControllerKind::StackedRelu => {
                Self::StackedRelu(StackedReluController::init(m, k, seed, u_min, u_max))
            }
            ControllerKind::Linear => Self::Linear(LinearController::project(Some(k), 0.5 * k, u_min, u_max)),
            ControllerKind::LinearUnconstrained => {
                Self::Linear(LinearController::project(None, 0.5 * k, u_min, u_max))
            }
            ControllerKind::Mlp => Self::Mlp(UnconstrainedMlp::init(m, k, seed, u_min, u_max)),
        }
    }

    pub fn raw(&self, v: f64) -> f64 {
        match self {
            Self::StackedRelu(c) => c.raw(v),
            Self::Linear(c) => c.raw(v),
            Self::Mlp(c) => c.raw(v),
        }
    }

    pub fn eval(&self, v: f64) -> f64 {
        match self {
            Self::StackedRelu(c) => c.eval(v),
            Self::Linear(c) => c.eval(v),
            Self::Mlp(c) => c.eval(v),
        }
    }

    pub fn slope_at(&self, v: f64) -> f64 {
        match self {
            Self::StackedRelu(c) => c.slope_at(v),
            Self::Linear(c) => c.c,
            Self::Mlp(c) => c.slope_at(v),
        }
    }

    /// (max, min) piece slope over the whole real line.
    pub fn slope_range(&self) -> (f64, f64) {
        match self {
            Self::StackedRelu(c) => slope_extremes(c.breakpoints(), |v| c.slope_at(v)),
            Self::Linear(c) => (c.c, c.c),
            Self::Mlp(c) => slope_extremes(c.breakpoints(), |v| c.slope_at(v)),
        }
    }

    /// Cap enforced by projection, if any.
    pub fn slope_cap(&self) -> Option<f64> {
        match self {
            Self::StackedRelu(c) => Some(c.k),
            Self::Linear(c) => c.k,
            Self::Mlp(_) => None,
        }
    }

    pub fn limits(&self) -> (f64, f64) {
        match self {
            Self::StackedRelu(c) => (c.u_min, c.u_max),
            Self::Linear(c) => (c.u_min, c.u_max),
            Self::Mlp(c) => (c.u_min, c.u_max),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::StackedRelu(c) => c.params(),
            Self::Linear(c) => vec![c.c],
            Self::Mlp(c) => c.params(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::StackedRelu(c) => 4 * c.hidden_units(),
            Self::Linear(_) => 1,
            Self::Mlp(c) => 3 * c.hidden_units() + 1,
        }
    }

    pub fn param_gradient(&self, v: f64) -> Vec<f64> {
        match self {
            Self::StackedRelu(c) => c.param_gradient(v),
            Self::Linear(c) => c.param_gradient(v),
            Self::Mlp(c) => c.param_gradient(v),
        }
    }

    /// Replaces the parameters, projecting onto the constraint set for
    /// capped controllers.
    pub fn with_params(&self, p: &[f64]) -> Result<Self, ControllerError> {
        let expected = self.param_count();
        if p.len() != expected {
            return Err(ControllerError::ShapeMismatch {
                expected,
                got: p.len(),
            });
        }
        Ok(match self {
            Self::StackedRelu(c) => {
                let m = c.hidden_units();
                Self::StackedRelu(StackedReluController::project(
                    c.k,
                    &p[..m],
                    &p[m..2 * m],
                    &p[2 * m..3 * m],
                    &p[3 * m..],
                    c.u_min,
                    c.u_max,
                ))
            }
            Self::Linear(c) => Self::Linear(LinearController::project(c.k, p[0], c.u_min, c.u_max)),
            Self::Mlp(c) => {
                let m = c.hidden_units();
                Self::Mlp(UnconstrainedMlp {
                    w1: p[..m].to_vec(),
                    b1: p[m..2 * m].to_vec(),
                    w2: p[2 * m..3 * m].to_vec(),
                    b2: p[3 * m],
                    u_min: c.u_min,
                    u_max: c.u_max,
                })
            }
        })
    }

    /// Structural validity (constraint invariants for stacked-ReLU, limits for all).
    pub fn validate(&self) -> Result<(), ControllerError> {
        match self {
            Self::StackedRelu(c) => c.check_invariants(),
            Self::Linear(c) => {
                check_limits(c.u_min, c.u_max)?;
                match c.k {
                    Some(k) if !(c.c > 0.0 && c.c < k) => Err(ControllerError::InvariantViolated(
                        format!("gain {} outside (0, {k})", c.c),
                    )),
                    _ => Ok(()),
                }
            }
            Self::Mlp(c) => {
                check_limits(c.u_min, c.u_max)?;
                let m = c.w1.len();
                if m == 0 || c.b1.len() != m || c.w2.len() != m {
                    return Err(ControllerError::InvariantViolated("inconsistent MLP widths".into()));
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_unit() -> StackedReluController {
        StackedReluController::new(1.0, vec![0.5], vec![0.0], vec![-0.5], vec![0.0], -10.0, 10.0)
            .unwrap()
    }

    fn two_unit() -> StackedReluController {
        StackedReluController::new(
            1.0,
            vec![0.5, 0.4],
            vec![0.0, -0.1],
            vec![-0.5, -0.4],
            vec![0.0, -0.1],
            -10.0,
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn single_unit_is_linear() {
        let c = single_unit();
        assert!((c.eval(0.3) - 0.15).abs() < 1e-15);
        assert!((c.eval(-0.3) + 0.15).abs() < 1e-15);
        assert_eq!(c.eval(0.0), 0.0);
        assert_eq!(c.slope_at(0.7), 0.5);
        assert_eq!(c.slope_at(-0.2), 0.5);
        assert_eq!(c.max_slope(), 0.5);
    }

    #[test]
    fn two_unit_pieces() {
        let c = two_unit();
        // Oracle: evaluate each active piece separately.
        let oracle = |v: f64| {
            if v > 0.1 {
                0.5 * v + 0.4 * (v - 0.1)
            } else if v > -0.1 {
                0.5 * v
            } else {
                0.5 * v + 0.4 * (v + 0.1)
            }
        };
        for v in [-0.3, -0.15, -0.05, 0.0, 0.05, 0.2, 0.4] {
            assert!((c.eval(v) - oracle(v)).abs() < 1e-15, "v = {v}");
        }
        assert!((c.eval(0.2) - 0.14).abs() < 1e-15);
        assert!((c.slope_at(0.2) - 0.9).abs() < 1e-15);
        assert!((c.slope_at(0.05) - 0.5).abs() < 1e-15);
        let h = 1e-7;
        let fd = (c.eval(0.2 + h) - c.eval(0.2 - h)) / (2.0 * h);
        assert!((fd - 0.9).abs() < 1e-7);
        assert!((c.max_slope() - 0.9).abs() < 1e-15);
        assert!((c.min_slope() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn saturation_clamps_output() {
        let mut c = single_unit();
        c.u_min = -0.05;
        c.u_max = 0.05;
        assert_eq!(c.eval(1.0), 0.05);
        assert_eq!(c.eval(-1.0), -0.05);
        assert!(c.param_gradient(1.0).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn projection_clips_partial_sums() {
        let k = 2.0;
        let eps = PROJECTION_EPS_REL * k;
        let c = StackedReluController::project(k, &[k, k], &[0.0, -0.1], &[-k, -k], &[0.0, -0.1], -1.0, 1.0);
        assert!((c.s[0] - (k - eps)).abs() < 1e-15);
        assert!(c.s[1].abs() < 1e-15);
        assert!((c.z[0] + (k - eps)).abs() < 1e-15);
        c.check_invariants().unwrap();
        assert!(c.max_slope() <= k - eps + 1e-15);
    }

    #[test]
    fn projection_orders_biases() {
        let c = StackedReluController::project(1.0, &[0.3, 0.3], &[0.5, 0.2], &[-0.3, -0.3], &[0.0, 0.4], -1.0, 1.0);
        assert_eq!(c.b, vec![0.0, 0.0]);
        assert_eq!(c.d, vec![0.0, 0.0]);
    }

    #[test]
    fn projection_keeps_feasible_point() {
        let c = two_unit();
        let p = StackedReluController::project(c.k, &c.s, &c.b, &c.z, &c.d, c.u_min, c.u_max);
        for (a, b) in c.params().iter().zip(p.params()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_handles_nan() {
        let c = StackedReluController::project(1.0, &[f64::NAN, 0.3], &[0.0, f64::NAN], &[-0.2, f64::NAN], &[0.0, -0.1], -1.0, 1.0);
        c.check_invariants().unwrap();
    }

    #[test]
    fn gradients_on_single_unit() {
        let c = single_unit();
        assert_eq!(c.param_gradient(0.3), vec![0.3, 0.5, 0.0, 0.0]);
        let g = c.param_gradient(-0.3);
        assert_eq!(&g[..2], &[0.0, 0.0]);
        assert!((g[2] - 0.3).abs() < 1e-15);
        // d/dd [z ReLU(-v + d)] = z on the active branch.
        assert_eq!(g[3], -0.5);
    }

    #[test]
    fn init_is_feasible_and_deterministic() {
        let a = StackedReluController::init(20, 1.0, 9, -0.05, 0.05);
        a.check_invariants().unwrap();
        assert_eq!(a, StackedReluController::init(20, 1.0, 9, -0.05, 0.05));
        assert_ne!(a, StackedReluController::init(20, 1.0, 10, -0.05, 0.05));
        assert!((a.max_slope() - 0.5).abs() <= 0.05);
        assert_eq!(a.eval(0.0), 0.0);
    }

    #[test]
    fn linear_projection() {
        let c = LinearController::project(Some(2.0), 5.0, -1.0, 1.0);
        assert!((c.c - 2.0 * (1.0 - PROJECTION_EPS_REL)).abs() < 1e-15);
        let c = LinearController::project(Some(2.0), -1.0, -1.0, 1.0);
        assert!((c.c - 2.0 * PROJECTION_EPS_REL).abs() < 1e-15);
        let c = LinearController::project(None, 50.0, -1.0, 1.0);
        assert_eq!(c.c, 50.0);
    }

    #[test]
    fn checkpoint_json_shape() {
        let c = Controller::StackedRelu(single_unit());
        let v: serde_json::Value = serde_json::to_value(&c).unwrap();
        assert_eq!(v["type"], "stacked_relu");
        for key in ["k", "s", "b", "z", "d", "u_min", "u_max"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: Controller = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
        let lin = Controller::Linear(LinearController::project(Some(3.0), 1.0, -0.1, 0.1));
        assert_eq!(serde_json::to_value(&lin).unwrap()["type"], "linear");
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let c = UnconstrainedMlp::init(6, 2.0, 3, -10.0, 10.0);
        let wrapped = Controller::Mlp(c.clone());
        let p = wrapped.params();
        let v = 0.037;
        let g = c.param_gradient(v);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut hi = p.clone();
            hi[i] += h;
            let mut lo = p.clone();
            lo[i] -= h;
            let fd = (wrapped.with_params(&hi).unwrap().eval(v) - wrapped.with_params(&lo).unwrap().eval(v)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "param {i}: fd {fd} vs {}", g[i]);
        }
    }
}
