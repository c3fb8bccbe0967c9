//! `voltgrid` command-line tool.
//!
//! Exit codes: 0 success, 1 certified unsafe or diverged, 2 usage, parse or
//! I/O error.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod output;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::Rng as _;
use serde::Serialize;
use serde_json::json;

use voltgrid::bound_opt::{self, BarrierOptions, LipschitzBounds};
use voltgrid::controller::{Controller, ControllerKind};
use voltgrid::env::{self, CostSpec, NoiseSpec};
use voltgrid::grid_model::{self, FeederNetwork, DEFAULT_BASE_POWER_KVA, DEFAULT_BASE_VOLTAGE_KV};
use voltgrid::stability::{self, SlopeProfile, StabilityCertificate, SweepOptions};
use voltgrid::trainer::{self, EpisodeRecord, TrainConfig, TrainError, TrainObserver};
use voltgrid::rng;

use output::{write_atomic, write_json, RunManifest};

#[derive(Parser)]
#[command(name = "voltgrid", version, about = "Stability-certified decentralized voltage control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a network JSON from a branch CSV or an explicit-matrix file.
    BuildNet(BuildNetArgs),
    /// Compute per-bus slope caps in the stabilizing set.
    OptimizeBounds(OptimizeBoundsArgs),
    /// Check closed-loop stability of slopes, bounds or controllers.
    Certify(CertifyArgs),
    /// Train per-bus controllers.
    Train(TrainArgs),
    /// Evaluate controllers on a set of initial states without noise.
    Eval(EvalArgs),
    /// Draw random initial voltage deviations.
    SampleStates(SampleStatesArgs),
    /// Run one closed-loop rollout and dump it as CSV.
    Rollout(RolloutArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "source")]
struct NetSource {
    /// Branch CSV with columns from,to,r_ohm,x_ohm.
    #[arg(long)]
    branches: Option<PathBuf>,
    /// JSON file with "X" (and optionally "R") in per-unit.
    #[arg(long)]
    matrix: Option<PathBuf>,
}

#[derive(Args)]
struct BuildNetArgs {
    #[command(flatten)]
    source: NetSource,
    #[arg(long, default_value_t = DEFAULT_BASE_POWER_KVA)]
    base_kva: f64,
    #[arg(long, default_value_t = DEFAULT_BASE_VOLTAGE_KV)]
    base_kv: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizeBoundsArgs {
    #[arg(long)]
    net: PathBuf,
    /// JSON array of positive per-bus weights (default all ones).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Emit the uniform caps 2/λmax(X) instead of optimizing.
    #[arg(long)]
    uniform: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "subject")]
struct CertifySubject {
    /// JSON array of controllers, one per bus.
    #[arg(long)]
    controllers: Option<PathBuf>,
    /// JSON array with one slope per bus.
    #[arg(long)]
    slopes: Option<PathBuf>,
    /// Bounds JSON from optimize-bounds.
    #[arg(long)]
    bounds: Option<PathBuf>,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    net: PathBuf,
    #[command(flatten)]
    subject: CertifySubject,
    /// Random slope profiles (bounds) or states (controllers) to check.
    #[arg(long, default_value_t = 1000, value_parser = positive_usize)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// A certificate passes when the spectral radius is below 1 - margin.
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
    /// Half-width of the state box sampled for controllers, p.u.
    #[arg(long, default_value_t = 0.1)]
    magnitude: f64,
    /// Sweep bounds even when they lie outside the stabilizing set.
    #[arg(long)]
    allow_infeasible: bool,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    bounds: PathBuf,
    /// JSON training configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "type", default_value = "stacked_relu", value_parser = parse_kind)]
    kind: ControllerKind,
    /// Overrides the configuration's master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatesSource {
    /// JSON array of initial states.
    #[arg(long)]
    test_states: Option<PathBuf>,
    /// Number of states to sample when no file is given.
    #[arg(long, default_value_t = 100)]
    n_states: usize,
    #[arg(long, default_value_t = env::DEFAULT_INIT_MAGNITUDE)]
    magnitude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    net: PathBuf,
    /// Controllers JSON (final controllers or a checkpoint).
    #[arg(long)]
    checkpoints: PathBuf,
    #[command(flatten)]
    states: StatesSource,
    #[arg(long, default_value_t = env::DEFAULT_HORIZON)]
    horizon: usize,
    #[arg(long, default_value_t = env::DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleStatesArgs {
    #[arg(long, required_unless_present = "n_buses")]
    net: Option<PathBuf>,
    #[arg(long)]
    n_buses: Option<usize>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = env::DEFAULT_INIT_MAGNITUDE)]
    magnitude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    controllers: PathBuf,
    /// JSON array with the initial deviation; sampled from --seed if absent.
    #[arg(long)]
    v0: Option<PathBuf>,
    #[arg(long, default_value_t = env::DEFAULT_INIT_MAGNITUDE)]
    magnitude: f64,
    #[arg(long, default_value_t = env::DEFAULT_HORIZON)]
    horizon: usize,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = env::DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long)]
    out: PathBuf,
}

fn positive_usize(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_kind(s: &str) -> std::result::Result<ControllerKind, String> {
    s.parse()
}

/// Prints a line to stdout, ignoring a closed pipe.
fn say(line: &str) {
    let _ = writeln!(std::io::stdout(), "{line}");
}

/// Successful commands either pass or report an unsafe/diverged result.
enum Outcome {
    Pass,
    Unsafe(String),
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} {}", path.display()))
}

fn load_net(path: &Path) -> Result<FeederNetwork> {
    grid_model::load_network_file(path).with_context(|| format!("loading network {}", path.display()))
}

fn load_bounds(path: &Path, n: usize) -> Result<LipschitzBounds> {
    let value: serde_json::Value = read_json(path, "bounds")?;
    let bounds = match value {
        serde_json::Value::Array(_) => {
            let k: Vec<f64> = serde_json::from_value(value)?;
            let w = vec![1.0; k.len()];
            LipschitzBounds {
                log_volume: bound_opt::log_volume(&k, &w),
                k,
                w,
                feasibility_margin: f64::NAN,
            }
        }
        other => serde_json::from_value(other).with_context(|| format!("parsing bounds {}", path.display()))?,
    };
    if bounds.k.len() != n {
        bail!("bounds have {} entries but the network has {n} buses", bounds.k.len());
    }
    Ok(bounds)
}

fn load_controllers(path: &Path, n: usize) -> Result<Vec<Controller>> {
    let value: serde_json::Value = read_json(path, "controllers")?;
    let ctrls: Vec<Controller> = match value {
        serde_json::Value::Array(_) => serde_json::from_value(value)?,
        other => vec![serde_json::from_value(other)?],
    };
    if ctrls.len() != n {
        bail!("{} controllers for a {n}-bus network", ctrls.len());
    }
    for (i, c) in ctrls.iter().enumerate() {
        c.validate().with_context(|| format!("controller for bus {i}"))?;
    }
    Ok(ctrls)
}

fn load_states(src: &StatesSource, n: usize) -> Result<Vec<Vec<f64>>> {
    let states: Vec<Vec<f64>> = match &src.test_states {
        Some(p) => read_json(p, "states")?,
        None => env::sample_initial_states(n, src.n_states, src.magnitude, src.seed)?,
    };
    if let Some(bad) = states.iter().position(|s| s.len() != n) {
        bail!("state {bad} has {} entries, expected {n}", states[bad].len());
    }
    Ok(states)
}

fn cmd_build_net(a: BuildNetArgs) -> Result<Outcome> {
    let net = match (&a.source.branches, &a.source.matrix) {
        (Some(csv), _) => grid_model::load_feeder(csv, a.base_kva, a.base_kv)?,
        (_, Some(m)) => load_net(m)?,
        _ => unreachable!("clap enforces exactly one source"),
    };
    write_atomic(&a.out, net.to_json()?.as_bytes())?;
    eprintln!("wrote {} ({} buses)", a.out.display(), net.n_buses());
    Ok(Outcome::Pass)
}

fn cmd_optimize_bounds(a: OptimizeBoundsArgs) -> Result<Outcome> {
    let net = load_net(&a.net)?;
    let n = net.n_buses();
    let bounds = if a.uniform {
        bound_opt::uniform_bound(&net)?
    } else {
        let w: Vec<f64> = match &a.weights {
            Some(p) => read_json(p, "weights")?,
            None => vec![1.0; n],
        };
        bound_opt::optimize_bounds(&net, &w, &BarrierOptions::default())?
    };
    write_json(&a.out, &bounds)?;
    eprintln!("log volume {:.6}, margin {:.3e}", bounds.log_volume, bounds.feasibility_margin);
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct CertifyReport {
    mode: &'static str,
    rho: f64,
    stable: bool,
    margin: f64,
    eigenvalues: Vec<f64>,
    samples: usize,
    violations: usize,
    worst_index: Option<usize>,
    worst_slopes: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    worst_state: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bounds_feasible: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    definiteness_margin: Option<f64>,
}

fn certify_slopes(net: &FeederNetwork, slopes: Vec<f64>, margin: f64) -> Result<CertifyReport> {
    if slopes.len() != net.n_buses() {
        bail!("{} slopes for a {}-bus network", slopes.len(), net.n_buses());
    }
    let cert = stability::closed_loop_spectral_radius(net, &SlopeProfile(slopes.clone()), margin)?;
    Ok(CertifyReport {
        mode: "slopes",
        rho: cert.spectral_radius,
        stable: cert.stable,
        margin,
        violations: usize::from(!cert.stable),
        eigenvalues: cert.eigenvalues,
        samples: 1,
        worst_index: None,
        worst_slopes: slopes,
        worst_state: None,
        bounds_feasible: None,
        definiteness_margin: None,
    })
}

fn certify_bounds(net: &FeederNetwork, bounds: &LipschitzBounds, a: &CertifyArgs) -> Result<CertifyReport> {
    let membership = stability::in_stabilizing_set(net, &bounds.k)?;
    if !membership.feasible && !a.allow_infeasible {
        // The box itself is outside the set: the corner profile is the witness.
        let corner = bounds.k.clone();
        let mut report = certify_slopes(net, corner, a.margin)?;
        report.mode = "bounds";
        report.stable = false;
        report.violations = 1;
        report.bounds_feasible = Some(false);
        report.definiteness_margin = Some(membership.definiteness_margin);
        return Ok(report);
    }
    let opts = SweepOptions {
        margin: a.margin,
        allow_infeasible: a.allow_infeasible,
    };
    let sweep = stability::sample_stability_sweep(net, &bounds.k, a.samples, a.seed, opts)?;
    let violations = if a.margin > 0.0 { sweep.n_below_margin } else { sweep.n_violations };
    Ok(CertifyReport {
        mode: "bounds",
        rho: sweep.worst.spectral_radius,
        stable: violations == 0,
        margin: a.margin,
        eigenvalues: sweep.worst.eigenvalues,
        samples: sweep.n_samples,
        violations,
        worst_index: Some(sweep.worst_index),
        worst_slopes: sweep.worst_slopes.0,
        worst_state: None,
        bounds_feasible: Some(membership.feasible),
        definiteness_margin: Some(membership.definiteness_margin),
    })
}

fn certify_controllers(net: &FeederNetwork, ctrls: &[Controller], a: &CertifyArgs) -> Result<CertifyReport> {
    let n = net.n_buses();
    let caps: Option<Vec<f64>> = ctrls.iter().map(Controller::slope_cap).collect();
    let (caps_ok, definiteness_margin) = match &caps {
        Some(k) => {
            let m = stability::in_stabilizing_set(net, k)?;
            (Some(m.feasible && trainer::caps_hold(net, ctrls)?), Some(m.definiteness_margin))
        }
        None => (None, None),
    };
    let mut rng = rng::seeded(a.seed);
    let mut worst: Option<(usize, Vec<f64>, Vec<f64>, StabilityCertificate)> = None;
    let mut violations = 0;
    for idx in 0..a.samples {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-a.magnitude..=a.magnitude)).collect();
        let slopes: Vec<f64> = ctrls.iter().zip(&v).map(|(c, &vi)| c.slope_at(vi)).collect();
        let cert = stability::closed_loop_spectral_radius(net, &SlopeProfile(slopes.clone()), a.margin)?;
        if !cert.stable {
            violations += 1;
        }
        if worst.as_ref().is_none_or(|w| cert.spectral_radius > w.3.spectral_radius) {
            worst = Some((idx, v, slopes, cert));
        }
    }
    let (idx, v, slopes, cert) = worst.expect("at least one sample");
    Ok(CertifyReport {
        mode: "controllers",
        rho: cert.spectral_radius,
        stable: violations == 0 && caps_ok != Some(false),
        margin: a.margin,
        eigenvalues: cert.eigenvalues,
        samples: a.samples,
        violations,
        worst_index: Some(idx),
        worst_slopes: slopes,
        worst_state: Some(v),
        bounds_feasible: caps_ok,
        definiteness_margin,
    })
}

fn cmd_certify(a: CertifyArgs) -> Result<Outcome> {
    if !(a.margin >= 0.0 && a.margin < 1.0) {
        bail!("--margin must lie in [0, 1)");
    }
    if !(a.magnitude > 0.0) {
        bail!("--magnitude must be positive");
    }
    let net = load_net(&a.net)?;
    let n = net.n_buses();
    let report = if let Some(p) = &a.subject.slopes {
        certify_slopes(&net, read_json(p, "slopes")?, a.margin)?
    } else if let Some(p) = &a.subject.bounds {
        certify_bounds(&net, &load_bounds(p, n)?, &a)?
    } else if let Some(p) = &a.subject.controllers {
        certify_controllers(&net, &load_controllers(p, n)?, &a)?
    } else {
        unreachable!("clap enforces exactly one subject")
    };
    let text = serde_json::to_string_pretty(&report)?;
    say(&text);
    if let Some(out) = &a.out {
        write_atomic(out, format!("{text}\n").as_bytes())?;
    }
    Ok(if report.stable {
        Outcome::Pass
    } else {
        Outcome::Unsafe(format!(
            "spectral radius {:.9} with {} failing sample(s)",
            report.rho, report.violations
        ))
    })
}

struct CliObserver {
    dir: PathBuf,
    rows: Vec<EpisodeRecord>,
    written: Vec<String>,
    error: Option<anyhow::Error>,
}

impl TrainObserver for CliObserver {
    fn updated(&mut self, record: &EpisodeRecord, _controllers: &[Controller]) {
        self.rows.push(record.clone());
    }

    fn checkpoint(&mut self, episode: usize, controllers: &[Controller]) {
        if self.error.is_some() {
            return;
        }
        let name = format!("checkpoints/episode_{episode:04}.json");
        match write_json(&self.dir.join(&name), controllers) {
            Ok(()) => self.written.push(name),
            Err(e) => self.error = Some(e),
        }
    }
}

fn training_log(rows: &[EpisodeRecord]) -> String {
    let mut s = String::from("episode,bus,mean_batch_cost,test_cost,lr,spectral_radius_check\n");
    for r in rows {
        let rho = r.spectral_radius.map(|x| x.to_string()).unwrap_or_default();
        for (bus, (c, t)) in r.mean_batch_cost.iter().zip(&r.test_cost).enumerate() {
            s.push_str(&format!("{},{bus},{c},{t},{},{rho}\n", r.episode, r.lr));
        }
    }
    s
}

fn cmd_train(a: TrainArgs) -> Result<Outcome> {
    let net = load_net(&a.net)?;
    let bounds = load_bounds(&a.bounds, net.n_buses())?;
    let mut config: TrainConfig = match &a.config {
        Some(p) => read_json(p, "training config")?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(e) = a.episodes {
        config.episodes = e;
    }
    if let Some(h) = a.batch {
        config.batch = h;
    }
    config.validate()?;

    let kind_name = serde_json::to_value(a.kind)?;
    let mut manifest = RunManifest::new(
        "train",
        json!({
            "controller_type": kind_name,
            "train": config,
            "default_origins": TrainConfig::default_origins(),
        }),
        json!({
            "seed": config.seed,
            "action_bound_seed": config.action_bound_seed,
            "init_seed": config.init_seed,
            "test_seed": config.test_seed,
            "safety_seed": config.safety_seed,
        }),
    );
    manifest.input(&a.net)?;
    manifest.input(&a.bounds)?;
    if let Some(p) = &a.config {
        manifest.input(p)?;
    }
    for name in ["log.csv", "controllers.json", "report.json"] {
        manifest.output(name);
    }
    if config.checkpoint_every > 0 {
        for e in (config.checkpoint_every..=config.episodes).step_by(config.checkpoint_every) {
            manifest.output(format!("checkpoints/episode_{e:04}.json"));
        }
    }
    if config.episodes > 0 && (config.checkpoint_every == 0 || !config.episodes.is_multiple_of(config.checkpoint_every)) {
        manifest.output(format!("checkpoints/episode_{:04}.json", config.episodes));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("manifest.json"), &manifest)?;

    let mut obs = CliObserver {
        dir: a.out.clone(),
        rows: Vec::new(),
        written: Vec::new(),
        error: None,
    };
    let result = trainer::train(&net, &bounds, &config, a.kind, &mut obs);
    write_atomic(&a.out.join("log.csv"), training_log(&obs.rows).as_bytes())?;
    if let Some(e) = obs.error {
        return Err(e);
    }
    match result {
        Ok(outcome) => {
            write_json(&a.out.join("controllers.json"), &outcome.controllers)?;
            write_json(&a.out.join("report.json"), &outcome.report)?;
            eprintln!(
                "test cost {:.6} -> {:.6}; {} unsafe update(s)",
                outcome.report.initial_test_total, outcome.report.final_test.mean_total, outcome.report.safety_violations
            );
            if outcome.report.safety_violations > 0 {
                return Ok(Outcome::Unsafe(format!(
                    "{} post-update policies failed the certificate",
                    outcome.report.safety_violations
                )));
            }
            Ok(Outcome::Pass)
        }
        Err(TrainError::NonFiniteLoss { episode, bus }) => Ok(Outcome::Unsafe(format!(
            "training diverged in episode {episode} (bus {bus:?})"
        ))),
        Err(e) => Err(e.into()),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<Outcome> {
    let net = load_net(&a.net)?;
    let n = net.n_buses();
    let ctrls = load_controllers(&a.checkpoints, n)?;
    let states = load_states(&a.states, n)?;
    let cost = CostSpec {
        gamma: a.gamma,
        ..CostSpec::default()
    };
    cost.validate()?;
    let mut manifest = RunManifest::new(
        "eval",
        json!({ "horizon": a.horizon, "cost": cost, "n_states": states.len(), "magnitude": a.states.magnitude }),
        json!({ "seed": a.states.seed }),
    );
    manifest.input(&a.net)?;
    manifest.input(&a.checkpoints)?;
    if let Some(p) = &a.states.test_states {
        manifest.input(p)?;
    }
    manifest.output("eval.json");
    manifest.output("costs.csv");
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("manifest.json"), &manifest)?;

    let e = trainer::evaluate(&net, &ctrls, &states, &cost, a.horizon)?;
    let mut csv = String::from("rollout,total");
    for i in 0..n {
        csv.push_str(&format!(",bus_{i}"));
    }
    csv.push('\n');
    for (h, total) in e.per_rollout_total.iter().enumerate() {
        csv.push_str(&format!("{h},{total}"));
        for c in &e.per_rollout_bus[h] {
            csv.push_str(&format!(",{c}"));
        }
        csv.push('\n');
    }
    write_atomic(&a.out.join("costs.csv"), csv.as_bytes())?;
    write_json(
        &a.out.join("eval.json"),
        &json!({
            "mean_total": e.mean_total,
            "median_total": e.median_total,
            "mean_per_bus": e.mean_per_bus,
            "diverged": e.diverged,
            "rollouts": e.per_rollout_total.len(),
        }),
    )?;
    say(&format!("mean {:.6} median {:.6}", e.mean_total, e.median_total));
    Ok(if e.diverged > 0 {
        Outcome::Unsafe(format!("{} rollout(s) hit the divergence guard", e.diverged))
    } else {
        Outcome::Pass
    })
}

fn cmd_sample_states(a: SampleStatesArgs) -> Result<Outcome> {
    let n = match (a.n_buses, &a.net) {
        (Some(n), _) => n,
        (None, Some(p)) => load_net(p)?.n_buses(),
        (None, None) => unreachable!("clap requires one of them"),
    };
    let states = env::sample_initial_states(n, a.n, a.magnitude, a.seed)?;
    write_atomic(&a.out, format!("{}\n", serde_json::to_string(&states)?).as_bytes())?;
    Ok(Outcome::Pass)
}

fn cmd_rollout(a: RolloutArgs) -> Result<Outcome> {
    let net = load_net(&a.net)?;
    let n = net.n_buses();
    let ctrls = load_controllers(&a.controllers, n)?;
    let v0: Vec<f64> = match &a.v0 {
        Some(p) => read_json(p, "initial state")?,
        None => env::sample_initial_states(n, 1, a.magnitude, a.seed)?.remove(0),
    };
    if !(a.sigma >= 0.0) {
        bail!("--sigma must be nonnegative");
    }
    let cost = CostSpec {
        gamma: a.gamma,
        ..CostSpec::default()
    };
    cost.validate()?;
    let tr = env::rollout(&net, &ctrls, &v0, a.horizon, NoiseSpec { sigma: a.sigma }, a.seed)?;
    let mut buf = Vec::new();
    tr.write_csv(&mut buf, &cost)?;
    write_atomic(&a.out, &buf)?;
    say(&format!("total cost {:.6}", tr.total_cost(&cost)));
    Ok(match tr.diverged_at {
        Some(t) => Outcome::Unsafe(format!("divergence guard hit at step {t}")),
        None => Outcome::Pass,
    })
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("VOLTGRID_THREADS") {
        let n: usize = v.parse().with_context(|| format!("VOLTGRID_THREADS={v} is not a count"))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Outcome> {
    configure_threads()?;
    match cli.command {
        Command::BuildNet(a) => cmd_build_net(a),
        Command::OptimizeBounds(a) => cmd_optimize_bounds(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SampleStates(a) => cmd_sample_states(a),
        Command::Rollout(a) => cmd_rollout(a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Unsafe(msg)) => {
            eprintln!("unsafe: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
