//! Local exponential stability of the closed-loop voltage iteration.
//!
//! With per-bus slopes `D = diag(du_i/dv_i)` the Jacobian of
//! `v_{t+1} = v_t - X u(v_t)` is `J = I - X D`. For `D > 0` it is similar to
//! the symmetric matrix `I - D^{1/2} X D^{1/2}` (multiply an eigenvector `w`
//! of `J` by `D^{1/2}`), so its spectrum is real and can be computed with a
//! symmetric solver. The iteration is locally exponentially stable when every
//! eigenvalue lies in `(-1, 1)`, which is guaranteed whenever
//! `0 < D < diag(k)` and `0 ≺ diag(k) ≺ 2X⁻¹`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid_model::FeederNetwork;
use crate::linalg::Matrix;
use crate::rng;

/// Sweep cap for the cyclic Jacobi solver.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Off-diagonal Frobenius norm, relative to `‖A‖_F`, at which Jacobi stops.
pub const JACOBI_REL_TOL: f64 = 1e-12;
/// Absolute asymmetry tolerated on input matrices (scaled by `max(1, max|a_ij|)`).
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Default margin for [`StabilityCertificate::stable`].
pub const DEFAULT_MARGIN: f64 = 1e-6;
/// Sweep samples are drawn from `(eps·k_i, k_i - eps·k_i)`.
pub const SWEEP_EPS_REL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("matrix is not symmetric (max |a_ij - a_ji| = {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("Jacobi iteration did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:.3e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },
    #[error("matrix is not positive definite (minimum eigenvalue {min_eigenvalue:.6e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("stability sweep requested with zero samples")]
    EmptySweep,
    #[error("bounds are outside the stabilizing set (positivity margin {positivity_margin:.3e}, definiteness margin {definiteness_margin:.3e})")]
    InfeasibleBounds {
        positivity_margin: f64,
        definiteness_margin: f64,
    },
}

/// Eigen-decomposition `A = V diag(values) Vᵀ`, values ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Eigenvectors stored as columns, ordered like `values`.
    pub vectors: Option<Matrix>,
    pub sweeps: usize,
}

impl SymEigen {
    /// `‖A - V Λ Vᵀ‖_F`. Panics if eigenvectors were not requested.
    pub fn residual(&self, a: &Matrix) -> f64 {
        let v = self.vectors.as_ref().expect("eigenvectors were not computed");
        let n = a.rows();
        let rebuilt = Matrix::from_fn(n, n, |i, j| {
            (0..n).map(|k| v[(i, k)] * self.values[k] * v[(j, k)]).sum()
        });
        a.sub(&rebuilt).frobenius_norm()
    }
}

fn check_symmetric(a: &Matrix) -> Result<(), StabilityError> {
    if !a.is_square() {
        return Err(StabilityError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let scale = a.as_slice().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let asymmetry = a.max_asymmetry();
    if asymmetry > SYMMETRY_TOL * scale || !asymmetry.is_finite() {
        return Err(StabilityError::NotSymmetric { asymmetry });
    }
    Ok(())
}

/// Cyclic Jacobi eigen-solver for a symmetric matrix.
///
/// Each rotation annihilates one off-diagonal pair; sweeps over all pairs are
/// repeated until the off-diagonal Frobenius norm drops to
/// `JACOBI_REL_TOL·‖A‖_F`. The input is symmetrized before iterating.
pub fn sym_eigen(a: &Matrix, want_vectors: bool) -> Result<SymEigen, StabilityError> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut w: Vec<f64> = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
        .as_slice()
        .to_vec();
    let mut v = want_vectors.then(|| Matrix::identity(n));
    let norm = a.frobenius_norm();
    let tol = JACOBI_REL_TOL * norm;
    let skip = tol / n.max(1) as f64;

    let off_norm = |w: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * w[i * n + j] * w[i * n + j];
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&w);
        if off <= tol || n < 2 {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(StabilityError::NoConvergence {
                sweeps,
                off_norm: off,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w[p * n + q];
                // Entries this small cannot keep the off-diagonal norm above
                // `tol` once every other entry is also below the skip level.
                if apq.abs() <= skip {
                    continue;
                }
                let app = w[p * n + p];
                let aqq = w[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_finite() {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                } else {
                    // |theta| overflowed: the rotation angle is ~1/(2 theta).
                    0.5 / theta
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Rows p and q are contiguous; rotate them, then mirror into
                // the columns. The p/q entries are overwritten right after.
                let (head, tail) = w.split_at_mut(q * n);
                let row_p = &mut head[p * n..(p + 1) * n];
                let row_q = &mut tail[..n];
                for (a, b) in row_p.iter_mut().zip(row_q.iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
                for k in 0..n {
                    w[k * n + p] = w[p * n + k];
                    w[k * n + q] = w[q * n + k];
                }
                w[p * n + p] = app - t * apq;
                w[q * n + q] = aqq + t * apq;
                w[p * n + q] = 0.0;
                w[q * n + p] = 0.0;
                if let Some(v) = v.as_mut() {
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let diag: Vec<f64> = (0..n).map(|i| w[i * n + i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[i].total_cmp(&diag[j]));
    let values = order.iter().map(|&i| diag[i]).collect();
    let vectors = v.map(|v| Matrix::from_fn(n, n, |i, j| v[(i, order[j])]));
    Ok(SymEigen {
        values,
        vectors,
        sweeps,
    })
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn sym_eigenvalues(a: &Matrix) -> Result<Vec<f64>, StabilityError> {
    sym_eigen(a, false).map(|e| e.values)
}

/// `f(A) = V f(Λ) Vᵀ` for a symmetric matrix.
fn sym_apply(eig: &SymEigen, f: impl Fn(f64) -> f64) -> Matrix {
    let v = eig.vectors.as_ref().expect("eigenvectors required");
    let n = eig.values.len();
    let fl: Vec<f64> = eig.values.iter().map(|&l| f(l)).collect();
    Matrix::from_fn(n, n, |i, j| (0..n).map(|k| v[(i, k)] * fl[k] * v[(j, k)]).sum())
}

/// Inverse of a symmetric positive-definite matrix through its eigen-decomposition.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix, StabilityError> {
    let eig = sym_eigen(a, true)?;
    let min = eig.values.first().copied().unwrap_or(f64::INFINITY);
    if !(min > 0.0) {
        return Err(StabilityError::NotPositiveDefinite { min_eigenvalue: min });
    }
    let inv = sym_apply(&eig, |l| 1.0 / l);
    // Exact symmetry for downstream symmetric solvers.
    let n = inv.rows();
    Ok(Matrix::from_fn(n, n, |i, j| 0.5 * (inv[(i, j)] + inv[(j, i)])))
}

/// `2 X⁻¹`, the upper boundary of the stabilizing slope set.
pub fn stabilizing_matrix(x: &Matrix) -> Result<Matrix, StabilityError> {
    Ok(spd_inverse(x)?.scaled(2.0))
}

/// Spectral radius of a general square matrix via `ρ(A) = lim ‖A^m‖^{1/m}`.
///
/// `A` is squared repeatedly with renormalisation, so `m = 2^j` grows fast
/// and complex or defective dominant eigenvalues need no special handling.
pub fn general_spectral_radius(a: &Matrix) -> f64 {
    assert!(a.is_square());
    let norm = a.frobenius_norm();
    if norm == 0.0 {
        return 0.0;
    }
    let mut b = a.scaled(1.0 / norm);
    // log ‖A^(2^j)‖ accumulated alongside the normalised power.
    let mut log_scale = norm.ln();
    let mut estimate = norm;
    for j in 1..=60 {
        let sq = b.matmul(&b);
        let sq_norm = sq.frobenius_norm();
        if sq_norm == 0.0 || !sq_norm.is_finite() {
            // Nilpotent to working precision.
            return if sq_norm == 0.0 { 0.0 } else { estimate };
        }
        log_scale = 2.0 * log_scale + sq_norm.ln();
        b = sq.scaled(1.0 / sq_norm);
        let next = (log_scale / f64::powi(2.0, j)).exp();
        if j > 20 && (next - estimate).abs() <= 1e-15 * next.max(1e-300) {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Per-bus controller slopes `du_i/dv_i` at an operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SlopeProfile(pub Vec<f64>);

impl SlopeProfile {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn all_positive(&self) -> bool {
        self.0.iter().all(|&d| d > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateMethod {
    /// Jacobi on `I - D^{1/2} X D^{1/2}`.
    Symmetric,
    /// Spectral radius only, from powers of `I - X D` (some slope ≤ 0).
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    #[serde(rename = "rho")]
    pub spectral_radius: f64,
    pub stable: bool,
    pub margin: f64,
    /// Ascending; empty when `method` is `General`.
    pub eigenvalues: Vec<f64>,
    pub method: CertificateMethod,
}

impl StabilityCertificate {
    fn from_eigenvalues(eigenvalues: Vec<f64>, margin: f64) -> Self {
        let spectral_radius = eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
        Self {
            spectral_radius,
            stable: spectral_radius < 1.0 - margin,
            margin,
            eigenvalues,
            method: CertificateMethod::Symmetric,
        }
    }

    /// Re-evaluates the verdict at another margin.
    pub fn with_margin(&self, margin: f64) -> Self {
        Self {
            stable: self.spectral_radius < 1.0 - margin,
            margin,
            ..self.clone()
        }
    }
}

/// `I - D^{1/2} X D^{1/2}` for nonnegative slopes.
pub fn symmetric_jacobian(x: &Matrix, slopes: &[f64]) -> Matrix {
    let root: Vec<f64> = slopes.iter().map(|d| d.sqrt()).collect();
    let m = x.diag_scaled(&root, &root);
    Matrix::identity(x.rows()).sub(&m)
}

/// `I - X D`, the closed-loop Jacobian.
pub fn jacobian(x: &Matrix, slopes: &[f64]) -> Matrix {
    let ones = vec![1.0; slopes.len()];
    Matrix::identity(x.rows()).sub(&x.diag_scaled(&ones, slopes))
}

/// Certificate for a reactance matrix given directly.
pub fn certify_matrix(
    x: &Matrix,
    slopes: &SlopeProfile,
    margin: f64,
) -> Result<StabilityCertificate, StabilityError> {
    if slopes.len() != x.rows() {
        return Err(StabilityError::DimensionMismatch {
            expected: x.rows(),
            got: slopes.len(),
        });
    }
    if slopes.all_positive() {
        let eig = sym_eigenvalues(&symmetric_jacobian(x, &slopes.0))?;
        Ok(StabilityCertificate::from_eigenvalues(eig, margin))
    } else {
        let rho = general_spectral_radius(&jacobian(x, &slopes.0));
        Ok(StabilityCertificate {
            spectral_radius: rho,
            stable: rho < 1.0 - margin,
            margin,
            eigenvalues: Vec::new(),
            method: CertificateMethod::General,
        })
    }
}

/// Spectral certificate of `I - X diag(slopes)` on a feeder.
pub fn closed_loop_spectral_radius(
    net: &FeederNetwork,
    slopes: &SlopeProfile,
    margin: f64,
) -> Result<StabilityCertificate, StabilityError> {
    certify_matrix(net.x(), slopes, margin)
}

/// Outcome of the `0 ≺ diag(k) ≺ 2X⁻¹` test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipReport {
    pub feasible: bool,
    /// `min_i k_i`.
    pub positivity_margin: f64,
    /// Minimum eigenvalue of `2X⁻¹ - diag(k)`.
    pub definiteness_margin: f64,
}

/// Membership test against a precomputed `2X⁻¹`.
pub fn membership_with(
    two_x_inv: &Matrix,
    k: &[f64],
) -> Result<MembershipReport, StabilityError> {
    if k.len() != two_x_inv.rows() {
        return Err(StabilityError::DimensionMismatch {
            expected: two_x_inv.rows(),
            got: k.len(),
        });
    }
    let positivity_margin = k.iter().copied().fold(f64::INFINITY, f64::min);
    if k.iter().any(|x| !x.is_finite()) {
        return Ok(MembershipReport {
            feasible: false,
            positivity_margin,
            definiteness_margin: f64::NEG_INFINITY,
        });
    }
    let slack = two_x_inv.sub(&Matrix::from_diag(k));
    let definiteness_margin = sym_eigenvalues(&slack)?[0];
    Ok(MembershipReport {
        feasible: positivity_margin > 0.0 && definiteness_margin > 0.0,
        positivity_margin,
        definiteness_margin,
    })
}

/// Whether slope caps `k` lie in the stabilizing set `0 ≺ diag(k) ≺ 2X⁻¹`.
///
/// The same set characterises the stabilizing diagonal linear gains.
pub fn in_stabilizing_set(
    net: &FeederNetwork,
    k: &[f64],
) -> Result<MembershipReport, StabilityError> {
    membership_with(&stabilizing_matrix(net.x())?, k)
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub margin: f64,
    /// Run even when `k` is outside the stabilizing set.
    pub allow_infeasible: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            allow_infeasible: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub worst: StabilityCertificate,
    pub worst_index: usize,
    pub worst_slopes: SlopeProfile,
    pub n_samples: usize,
    /// Samples with spectral radius ≥ 1.
    pub n_violations: usize,
    /// Samples not stable at the requested margin.
    pub n_below_margin: usize,
}

/// Slope profile for sweep sample `index`, uniform on `∏(ε k_i, k_i - ε k_i)`.
pub fn sweep_sample(k: &[f64], seed: u64, index: usize) -> SlopeProfile {
    let mut rng = rng::seeded(rng::stream_seed(seed, index as u64));
    SlopeProfile(
        k.iter()
            .map(|&ki| {
                let eps = SWEEP_EPS_REL * ki;
                eps + (ki - 2.0 * eps) * rng.random::<f64>()
            })
            .collect(),
    )
}

/// Empirical check of the stability condition: draws `n_samples` slope profiles
/// below the caps `k` and returns the one with the largest spectral radius.
///
/// Samples are evaluated in parallel; ties on the spectral radius resolve to
/// the lowest sample index, so the result depends only on `seed`.
pub fn sample_stability_sweep(
    net: &FeederNetwork,
    k: &[f64],
    n_samples: usize,
    seed: u64,
    options: SweepOptions,
) -> Result<SweepReport, StabilityError> {
    if n_samples == 0 {
        return Err(StabilityError::EmptySweep);
    }
    let x = net.x();
    let membership = in_stabilizing_set(net, k)?;
    if !membership.feasible && !options.allow_infeasible {
        return Err(StabilityError::InfeasibleBounds {
            positivity_margin: membership.positivity_margin,
            definiteness_margin: membership.definiteness_margin,
        });
    }
    let radii: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|idx| {
            let d = sweep_sample(k, seed, idx);
            certify_matrix(x, &d, options.margin).map(|c| c.spectral_radius)
        })
        .collect::<Result<_, _>>()?;
    let (worst_index, _) = radii
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &r)| {
            if r > bv {
                (i, r)
            } else {
                (bi, bv)
            }
        });
    let worst_slopes = sweep_sample(k, seed, worst_index);
    let worst = certify_matrix(x, &worst_slopes, options.margin)?;
    Ok(SweepReport {
        worst,
        worst_index,
        worst_slopes,
        n_samples,
        n_violations: radii.iter().filter(|&&r| r >= 1.0).count(),
        n_below_margin: radii.iter().filter(|&&r| r >= 1.0 - options.margin).count(),
    })
}
