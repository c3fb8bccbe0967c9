//! Radial feeder model under the LinDistFlow linearisation.
//!
//! Voltages obey `v = R p + X q + 1` where `R` and `X` are the resistance and
//! reactance sensitivity matrices of the non-substation buses. For a radial
//! network, `X[i][j]` is twice the total reactance of the branches shared by
//! the paths from buses `i` and `j` to the substation (likewise for `R`).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::stability::{self, StabilityError};

/// Multiplier applied to path-intersection sums when building `R` and `X`.
pub const SENSITIVITY_FACTOR: f64 = 2.0;
/// A matrix counts as positive definite when its minimum eigenvalue exceeds this.
pub const PD_TOL: f64 = 1e-10;
pub const DEFAULT_BASE_POWER_KVA: f64 = 100.0;
pub const DEFAULT_BASE_VOLTAGE_KV: f64 = 12.66;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("branch at row {row} ({from} -> {to}) closes a cycle")]
    CyclicTopology { row: usize, from: u32, to: u32 },
    #[error("bus {label} (first seen at row {row}) is not connected to the substation")]
    DisconnectedBus { label: u32, row: usize },
    #[error("branch at row {row} has non-positive reactance {x_ohm}")]
    NonPositiveReactance { row: usize, x_ohm: f64 },
    #[error("branch at row {row} has negative resistance {r_ohm}")]
    NegativeResistance { row: usize, r_ohm: f64 },
    #[error("{which} is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { which: &'static str, asymmetry: f64 },
    #[error("{which} is not positive definite (minimum eigenvalue {min_eigenvalue:.6e})")]
    NotPositiveDefinite {
        which: &'static str,
        min_eigenvalue: f64,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid base quantity: {0}")]
    InvalidBase(String),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Eigen(#[from] StabilityError),
}

/// One row of the branch CSV (`from,to,r_ohm,x_ohm`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    #[serde(rename = "from")]
    pub from_bus: u32,
    #[serde(rename = "to")]
    pub to_bus: u32,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

pub fn ohm_to_pu(z_ohm: f64, base_power_kva: f64, base_voltage_kv: f64) -> f64 {
    z_ohm * base_power_kva / (base_voltage_kv * base_voltage_kv * 1e3)
}

pub fn pu_to_ohm(z_pu: f64, base_power_kva: f64, base_voltage_kv: f64) -> f64 {
    z_pu * base_voltage_kv * base_voltage_kv * 1e3 / base_power_kva
}

/// Tree structure over the non-substation buses, 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    /// `parent[i]` is the upstream bus index, `None` for buses fed by the substation.
    pub parent: Vec<Option<usize>>,
    /// Per-unit resistance of the branch feeding bus `i`.
    pub branch_r: Vec<f64>,
    /// Per-unit reactance of the branch feeding bus `i`.
    pub branch_x: Vec<f64>,
}

/// Immutable feeder model.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederNetwork {
    n_buses: usize,
    /// File label of each bus index; empty for matrix-only networks.
    labels: Vec<u32>,
    topology: Option<Topology>,
    base_power_kva: Option<f64>,
    base_voltage_kv: Option<f64>,
    r: Matrix,
    x: Matrix,
}

/// On-disk layout shared by `net.json` and the explicit-matrix input.
#[derive(Debug, Serialize, Deserialize)]
struct NetworkFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_buses: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_power_kva: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_voltage_kv: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    labels: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    topology: Option<Topology>,
    #[serde(rename = "X")]
    x: Matrix,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    r: Option<Matrix>,
}

fn validate_matrix(m: &Matrix, which: &'static str, semidefinite: bool) -> Result<(), GridError> {
    if !m.is_square() {
        return Err(GridError::DimensionMismatch(format!(
            "{which} is {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.all_finite() {
        return Err(GridError::NotSymmetric {
            which,
            asymmetry: f64::NAN,
        });
    }
    let asymmetry = m.max_asymmetry();
    if asymmetry > 1e-9 {
        return Err(GridError::NotSymmetric { which, asymmetry });
    }
    let min_eigenvalue = stability::sym_eigenvalues(m)?
        .first()
        .copied()
        .unwrap_or(f64::NAN);
    let ok = if semidefinite {
        min_eigenvalue >= -PD_TOL
    } else {
        min_eigenvalue > PD_TOL
    };
    if !ok {
        return Err(GridError::NotPositiveDefinite {
            which,
            min_eigenvalue,
        });
    }
    Ok(())
}

/// Sensitivity matrices of a tree: `M[i][j] = 2 Σ` branch values on the
/// common part of the paths from `i` and `j` to the substation.
pub fn build_sensitivity(topology: &Topology) -> (Matrix, Matrix) {
    let n = topology.parent.len();
    // Cumulative impedance from the substation down to each bus.
    let mut cum_r = vec![f64::NAN; n];
    let mut cum_x = vec![f64::NAN; n];
    fn fill(i: usize, t: &Topology, cr: &mut [f64], cx: &mut [f64]) {
        if !cr[i].is_nan() {
            return;
        }
        match t.parent[i] {
            None => {
                cr[i] = t.branch_r[i];
                cx[i] = t.branch_x[i];
            }
            Some(p) => {
                fill(p, t, cr, cx);
                cr[i] = cr[p] + t.branch_r[i];
                cx[i] = cx[p] + t.branch_x[i];
            }
        }
    }
    for i in 0..n {
        fill(i, topology, &mut cum_r, &mut cum_x);
    }
    let ancestors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut chain = vec![i];
            let mut cur = i;
            while let Some(p) = topology.parent[cur] {
                chain.push(p);
                cur = p;
            }
            chain
        })
        .collect();
    let mut r = Matrix::zeros(n, n);
    let mut x = Matrix::zeros(n, n);
    let mut mark = vec![usize::MAX; n];
    for i in 0..n {
        for &a in &ancestors[i] {
            mark[a] = i;
        }
        for j in 0..=i {
            // First ancestor of j that is also an ancestor of i.
            if let Some(&lca) = ancestors[j].iter().find(|&&a| mark[a] == i) {
                r[(i, j)] = SENSITIVITY_FACTOR * cum_r[lca];
                x[(i, j)] = SENSITIVITY_FACTOR * cum_x[lca];
            }
            r[(j, i)] = r[(i, j)];
            x[(j, i)] = x[(i, j)];
        }
    }
    (r, x)
}

/// Parses branch records, reporting 1-based data row numbers on failure.
pub fn read_branches<R: std::io::Read>(reader: R) -> Result<Vec<BranchRecord>, GridError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| GridError::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let expected = ["from", "to", "r_ohm", "x_ohm"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(GridError::Parse {
            row: 0,
            message: format!("expected header `from,to,r_ohm,x_ohm`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<BranchRecord>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| GridError::Parse {
            row,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(GridError::Parse {
            row: 1,
            message: "no branch rows".into(),
        });
    }
    Ok(out)
}

impl FeederNetwork {
    /// Builds a network from branch records with impedances in ohms.
    pub fn from_branches(
        branches: &[BranchRecord],
        base_power_kva: f64,
        base_voltage_kv: f64,
    ) -> Result<Self, GridError> {
        if !(base_power_kva > 0.0 && base_voltage_kv > 0.0) {
            return Err(GridError::InvalidBase(format!(
                "base power {base_power_kva} kVA, base voltage {base_voltage_kv} kV"
            )));
        }
        for (i, b) in branches.iter().enumerate() {
            let row = i + 1;
            if !(b.x_ohm > 0.0) {
                return Err(GridError::NonPositiveReactance { row, x_ohm: b.x_ohm });
            }
            if !(b.r_ohm >= 0.0) {
                return Err(GridError::NegativeResistance { row, r_ohm: b.r_ohm });
            }
        }

        // Union-find in row order pinpoints the branch that closes a cycle.
        let mut first_row: BTreeMap<u32, usize> = BTreeMap::new();
        for (i, b) in branches.iter().enumerate() {
            first_row.entry(b.from_bus).or_insert(i + 1);
            first_row.entry(b.to_bus).or_insert(i + 1);
        }
        let ids: BTreeMap<u32, usize> = first_row.keys().enumerate().map(|(i, &l)| (l, i)).collect();
        let mut uf: Vec<usize> = (0..ids.len()).collect();
        fn find(uf: &mut [usize], mut a: usize) -> usize {
            while uf[a] != a {
                uf[a] = uf[uf[a]];
                a = uf[a];
            }
            a
        }
        let mut adjacency: BTreeMap<u32, Vec<(u32, usize)>> = BTreeMap::new();
        for (i, b) in branches.iter().enumerate() {
            let (fa, fb) = (find(&mut uf, ids[&b.from_bus]), find(&mut uf, ids[&b.to_bus]));
            if fa == fb {
                return Err(GridError::CyclicTopology {
                    row: i + 1,
                    from: b.from_bus,
                    to: b.to_bus,
                });
            }
            uf[fa] = fb;
            adjacency.entry(b.from_bus).or_default().push((b.to_bus, i));
            adjacency.entry(b.to_bus).or_default().push((b.from_bus, i));
        }

        // Orient edges away from the substation (label 0).
        let mut feeding_branch: BTreeMap<u32, (Option<u32>, usize)> = BTreeMap::new();
        let mut seen = BTreeSet::from([0u32]);
        let mut queue = VecDeque::from([0u32]);
        while let Some(bus) = queue.pop_front() {
            for &(next, branch) in adjacency.get(&bus).map(Vec::as_slice).unwrap_or(&[]) {
                if seen.insert(next) {
                    let parent = (bus != 0).then_some(bus);
                    feeding_branch.insert(next, (parent, branch));
                    queue.push_back(next);
                }
            }
        }
        if let Some((&label, &row)) = first_row.iter().find(|(l, _)| !seen.contains(l)) {
            return Err(GridError::DisconnectedBus { label, row });
        }

        let labels: Vec<u32> = feeding_branch.keys().copied().collect();
        let index: BTreeMap<u32, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let mut topology = Topology {
            parent: Vec::with_capacity(labels.len()),
            branch_r: Vec::with_capacity(labels.len()),
            branch_x: Vec::with_capacity(labels.len()),
        };
        for label in &labels {
            let (parent, branch) = feeding_branch[label];
            let b = &branches[branch];
            topology.parent.push(parent.map(|p| index[&p]));
            topology.branch_r.push(ohm_to_pu(b.r_ohm, base_power_kva, base_voltage_kv));
            topology.branch_x.push(ohm_to_pu(b.x_ohm, base_power_kva, base_voltage_kv));
        }
        let (r, x) = build_sensitivity(&topology);
        validate_matrix(&x, "X", false)?;
        validate_matrix(&r, "R", true)?;
        Ok(Self {
            n_buses: labels.len(),
            labels,
            topology: Some(topology),
            base_power_kva: Some(base_power_kva),
            base_voltage_kv: Some(base_voltage_kv),
            r,
            x,
        })
    }

    /// Network given directly by its sensitivity matrices (per-unit).
    /// `R` defaults to `X` when absent.
    pub fn from_matrices(x: Matrix, r: Option<Matrix>) -> Result<Self, GridError> {
        validate_matrix(&x, "X", false)?;
        if let Some(r) = &r {
            if r.rows() != x.rows() || r.cols() != x.cols() {
                return Err(GridError::DimensionMismatch(format!(
                    "R is {}x{} but X is {}x{}",
                    r.rows(),
                    r.cols(),
                    x.rows(),
                    x.cols()
                )));
            }
            validate_matrix(r, "R", true)?;
        }
        Ok(Self {
            n_buses: x.rows(),
            labels: Vec::new(),
            topology: None,
            base_power_kva: None,
            base_voltage_kv: None,
            r: r.unwrap_or_else(|| x.clone()),
            x,
        })
    }

    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn topology(&self) -> Option<&Topology> {
        self.topology.as_ref()
    }

    /// File label of each 0-based bus index (empty without topology).
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn base_power_kva(&self) -> Option<f64> {
        self.base_power_kva
    }

    pub fn base_voltage_kv(&self) -> Option<f64> {
        self.base_voltage_kv
    }

    /// `v = R p + X q + 1`.
    pub fn voltage(&self, p: &[f64], q: &[f64]) -> Vec<f64> {
        let rp = self.r.matvec(p);
        let xq = self.x.matvec(q);
        rp.iter().zip(&xq).map(|(a, b)| a + b + 1.0).collect()
    }

    pub fn to_json(&self) -> Result<String, GridError> {
        let file = NetworkFile {
            n_buses: Some(self.n_buses),
            base_power_kva: self.base_power_kva,
            base_voltage_kv: self.base_voltage_kv,
            labels: self.labels.clone(),
            topology: self.topology.clone(),
            x: self.x.clone(),
            // Matrix-only networks whose R was defaulted still write it out so the
            // file reloads to an identical network.
            r: Some(self.r.clone()),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Reads `net.json` as written by [`FeederNetwork::to_json`]; also accepts a
    /// bare `{ "X": ..., "R": ... }` file.
    pub fn from_json(text: &str) -> Result<Self, GridError> {
        let file: NetworkFile = serde_json::from_str(text)?;
        let mut net = Self::from_matrices(file.x, file.r)?;
        if let Some(n) = file.n_buses {
            if n != net.n_buses {
                return Err(GridError::DimensionMismatch(format!(
                    "n_buses = {n} but X is {}x{}",
                    net.n_buses, net.n_buses
                )));
            }
        }
        if let Some(t) = &file.topology {
            if t.parent.len() != net.n_buses
                || t.branch_r.len() != net.n_buses
                || t.branch_x.len() != net.n_buses
            {
                return Err(GridError::DimensionMismatch("topology length".into()));
            }
        }
        if !file.labels.is_empty() && file.labels.len() != net.n_buses {
            return Err(GridError::DimensionMismatch("labels length".into()));
        }
        net.labels = file.labels;
        net.topology = file.topology;
        net.base_power_kva = file.base_power_kva;
        net.base_voltage_kv = file.base_voltage_kv;
        Ok(net)
    }
}

fn read_to_string(path: &Path) -> Result<String, GridError> {
    std::fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a branch CSV (`from,to,r_ohm,x_ohm`, substation labelled 0) and
/// converts impedances to per-unit on the given bases.
pub fn load_feeder(
    branch_file: impl AsRef<Path>,
    base_power_kva: f64,
    base_voltage_kv: f64,
) -> Result<FeederNetwork, GridError> {
    let path = branch_file.as_ref();
    let file = std::fs::File::open(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let branches = read_branches(file)?;
    FeederNetwork::from_branches(&branches, base_power_kva, base_voltage_kv)
}

/// Network from explicit matrices.
pub fn load_matrix(x: Matrix, r: Option<Matrix>) -> Result<FeederNetwork, GridError> {
    FeederNetwork::from_matrices(x, r)
}

/// Loads either an explicit-matrix file or a full `net.json`.
pub fn load_network_file(path: impl AsRef<Path>) -> Result<FeederNetwork, GridError> {
    FeederNetwork::from_json(&read_to_string(path.as_ref())?)
}
