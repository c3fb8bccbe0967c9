//! Volume-maximal per-bus Lipschitz bounds.
//!
//! Solves `max Σ w_i log k_i  s.t.  0 ≺ diag(k) ≺ 2X⁻¹` with a log-det barrier:
//! for a decreasing sequence of `μ` the concave function
//! `φ_μ(k) = Σ w_i log k_i + μ log det(2X⁻¹ - diag(k))` is maximised by damped
//! Newton steps that never leave the strict interior. The problem is convex,
//! so the final iterate approximates the global maximiser; the last `μ` sets
//! how far inside the open boundary it lands.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid_model::FeederNetwork;
use crate::linalg::{cholesky, cholesky_solve, dot, norm2, Matrix};
use crate::stability::{self, StabilityError};

/// Relative shrink applied to the uniform bound `2/λmax(X)`.
pub const UNIFORM_SHRINK: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("weight {index} is {value}; weights must be positive and finite")]
    BadWeights { index: usize, value: f64 },
    #[error("expected {expected} weights, got {got}")]
    WeightLength { expected: usize, got: usize },
    #[error("point is not strictly feasible (min k = {min_k:.3e}, min slack eigenvalue = {min_slack:.3e})")]
    InfeasiblePoint { min_k: f64, min_slack: f64 },
    #[error("barrier method did not converge at mu = {mu:.1e} (KKT residual {kkt_residual:.3e})")]
    NoConvergence { mu: f64, kkt_residual: f64 },
    #[error(transparent)]
    Stability(#[from] StabilityError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBounds {
    pub k: Vec<f64>,
    pub w: Vec<f64>,
    pub log_volume: f64,
    /// Minimum eigenvalue of `2X⁻¹ - diag(k)`.
    #[serde(rename = "margin")]
    pub feasibility_margin: f64,
}

impl LipschitzBounds {
    fn new(k: Vec<f64>, w: Vec<f64>, two_x_inv: &Matrix) -> Result<Self, BoundError> {
        let report = stability::membership_with(two_x_inv, &k)?;
        let log_volume = log_volume(&k, &w);
        Ok(Self {
            k,
            w,
            log_volume,
            feasibility_margin: report.definiteness_margin,
        })
    }

    pub fn n_buses(&self) -> usize {
        self.k.len()
    }
}

pub fn log_volume(k: &[f64], w: &[f64]) -> f64 {
    k.iter().zip(w).map(|(k, w)| w * k.ln()).sum()
}

#[derive(Debug, Clone)]
pub struct BarrierOptions {
    pub mu_schedule: Vec<f64>,
    /// Per-`μ` stopping threshold on `‖∇φ_μ‖₂`; its square also bounds the
    /// squared Newton decrement.
    pub grad_tol: f64,
    pub max_newton_iters: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self {
            mu_schedule: (0..=8).map(|i| 10f64.powi(-i)).collect(),
            grad_tol: 1e-9,
            max_newton_iters: 200,
        }
    }
}

/// Uniform caps `k_i = (1 - δ)·2/λmax(X)`.
pub fn uniform_bound(net: &FeederNetwork) -> Result<LipschitzBounds, BoundError> {
    let eig = stability::sym_eigenvalues(net.x())?;
    let lmax = *eig.last().expect("non-empty network");
    let n = net.n_buses();
    let k = vec![(1.0 - UNIFORM_SHRINK) * 2.0 / lmax; n];
    LipschitzBounds::new(k, vec![1.0; n], &stability::stabilizing_matrix(net.x())?)
}

struct BarrierPoint {
    value: f64,
    /// `(2X⁻¹ - diag(k))⁻¹`
    slack_inv: Matrix,
}

fn evaluate(
    k: &[f64],
    w: &[f64],
    two_x_inv: &Matrix,
    mu: f64,
    want_inverse: bool,
) -> Result<BarrierPoint, BoundError> {
    let min_k = k.iter().copied().fold(f64::INFINITY, f64::min);
    let slack = two_x_inv.sub(&Matrix::from_diag(k));
    let eig = stability::sym_eigen(&slack, want_inverse)?;
    let min_slack = eig.values[0];
    if !(min_k > 0.0 && min_slack > 0.0) {
        return Err(BoundError::InfeasiblePoint { min_k, min_slack });
    }
    let log_det: f64 = eig.values.iter().map(|l| l.ln()).sum();
    let value = log_volume(k, w) + mu * log_det;
    let slack_inv = if want_inverse {
        let v = eig.vectors.as_ref().expect("requested");
        let n = k.len();
        Matrix::from_fn(n, n, |i, j| {
            (0..n).map(|m| v[(i, m)] * v[(j, m)] / eig.values[m]).sum()
        })
    } else {
        Matrix::zeros(0, 0)
    };
    Ok(BarrierPoint { value, slack_inv })
}

fn gradient_from(k: &[f64], w: &[f64], slack_inv: &Matrix, mu: f64) -> Vec<f64> {
    k.iter()
        .zip(w)
        .enumerate()
        .map(|(i, (k, w))| w / k - mu * slack_inv[(i, i)])
        .collect()
}

/// Barrier objective `Σ w_i log k_i + μ log det(2X⁻¹ - diag(k))`.
pub fn barrier_objective(k: &[f64], w: &[f64], x: &Matrix, mu: f64) -> Result<f64, BoundError> {
    let two_x_inv = stability::stabilizing_matrix(x)?;
    Ok(evaluate(k, w, &two_x_inv, mu, false)?.value)
}

/// Gradient `w_i/k_i - μ [(2X⁻¹ - diag(k))⁻¹]_ii` of [`barrier_objective`].
pub fn barrier_gradient(k: &[f64], w: &[f64], x: &Matrix, mu: f64) -> Result<Vec<f64>, BoundError> {
    let two_x_inv = stability::stabilizing_matrix(x)?;
    let p = evaluate(k, w, &two_x_inv, mu, true)?;
    Ok(gradient_from(k, w, &p.slack_inv, mu))
}

fn check_weights(w: &[f64], n: usize) -> Result<(), BoundError> {
    if w.len() != n {
        return Err(BoundError::WeightLength {
            expected: n,
            got: w.len(),
        });
    }
    if let Some((index, &value)) = w.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v.is_finite())) {
        return Err(BoundError::BadWeights { index, value });
    }
    Ok(())
}

/// Maximises `Σ w_i log k_i` over the stabilizing set.
///
/// Starts from half the uniform bound, which is strictly feasible for any
/// positive-definite `X`.
pub fn optimize_bounds(
    net: &FeederNetwork,
    w: &[f64],
    options: &BarrierOptions,
) -> Result<LipschitzBounds, BoundError> {
    let n = net.n_buses();
    check_weights(w, n)?;
    let two_x_inv = stability::stabilizing_matrix(net.x())?;
    let mut k: Vec<f64> = uniform_bound(net)?.k.iter().map(|k| 0.5 * k).collect();

    for &mu in &options.mu_schedule {
        let mut point = evaluate(&k, w, &two_x_inv, mu, true)?;
        let mut converged = false;
        let mut grad = gradient_from(&k, w, &point.slack_inv, mu);
        for _ in 0..options.max_newton_iters {
            if norm2(&grad) <= options.grad_tol {
                converged = true;
                break;
            }
            // Negated Hessian: diag(w/k²) + μ (S⁻¹ ∘ S⁻¹), positive definite.
            let neg_hess = Matrix::from_fn(n, n, |i, j| {
                let s = point.slack_inv[(i, j)];
                let d = if i == j { w[i] / (k[i] * k[i]) } else { 0.0 };
                d + mu * s * s
            });
            let step = match cholesky(&neg_hess) {
                Some(l) => cholesky_solve(&l, &grad),
                None => grad.clone(),
            };
            let decrement = dot(&grad, &step);
            if decrement <= (options.grad_tol * options.grad_tol).max(1e-24 * (1.0 + point.value.abs())) {
                // Squared Newton decrement below tolerance. Near the boundary the
                // gradient carries cancellation noise in stiff directions that no
                // step can remove, so this is the test that usually fires.
                converged = true;
                break;
            }
            let mut t = 1.0;
            let accepted = loop {
                let trial: Vec<f64> = k.iter().zip(&step).map(|(k, s)| k + t * s).collect();
                if let Ok(p) = evaluate(&trial, w, &two_x_inv, mu, true) {
                    if p.value >= point.value + 0.25 * t * decrement {
                        break Some((trial, p));
                    }
                }
                t *= 0.5;
                if t < 1e-20 {
                    break None;
                }
            };
            match accepted {
                Some((trial, _)) if trial == k => {
                    converged = true;
                    break;
                }
                Some((trial, p)) => {
                    k = trial;
                    point = p;
                    grad = gradient_from(&k, w, &point.slack_inv, mu);
                }
                None => {
                    converged = true;
                    break;
                }
            }
        }
        if !converged && norm2(&grad) > options.grad_tol {
            return Err(BoundError::NoConvergence {
                mu,
                kkt_residual: norm2(&grad),
            });
        }
    }
    LipschitzBounds::new(k, w.to_vec(), &two_x_inv)
}
