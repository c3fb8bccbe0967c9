#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use voltgrid::grid_model::{load_feeder, load_matrix, FeederNetwork};
use voltgrid::linalg::Matrix;

pub const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/ieee33bw_branches.csv");

pub fn feeder33() -> FeederNetwork {
    load_feeder(FIXTURE, 100.0, 12.66).unwrap()
}

pub fn three_bus_x() -> Matrix {
    Matrix::from_rows(&[vec![0.20, -0.16], vec![-0.16, 0.97]]).unwrap()
}

pub fn three_bus() -> FeederNetwork {
    load_matrix(three_bus_x(), None).unwrap()
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Random symmetric positive-definite matrix `AAᵀ + δI`.
pub fn random_pd<R: Rng>(rng: &mut R, n: usize) -> Matrix {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let m = &a * a.transpose() + DMatrix::identity(n, n) * 0.05;
    let m = (&m + m.transpose()) * 0.5;
    from_na(&m)
}

/// Sorted eigenvalue moduli and real parts of a general matrix.
pub fn general_eigen(m: &DMatrix<f64>) -> Vec<(f64, f64)> {
    let mut ev: Vec<(f64, f64)> = m.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect();
    ev.sort_by(|a, b| a.0.total_cmp(&b.0));
    ev
}

pub fn oracle_spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// `I - X diag(d)` as an oracle matrix.
pub fn closed_loop(x: &Matrix, d: &[f64]) -> DMatrix<f64> {
    let n = d.len();
    DMatrix::identity(n, n) - to_na(x) * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d))
}

/// Largest `t` with `t·diag(r) ≺ 2X⁻¹`, from the oracle.
pub fn max_feasible_scale(x: &Matrix, r: &[f64]) -> f64 {
    let n = r.len();
    let root = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, r.iter().map(|v| v.sqrt())));
    let m = &root * to_na(x) * &root;
    let lmax = m.symmetric_eigenvalues().max();
    2.0 / lmax
}
