use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_voltgrid");
const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/ieee33bw_branches.csv");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn voltgrid")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn build33(dir: &Path) -> String {
    let net = p(dir, "net.json");
    assert_eq!(code(&run(&["build-net", "--branches", FIXTURE, "--out", &net])), 0);
    net
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn build_net_from_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let net = build33(dir.path());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(net).unwrap()).unwrap();
    assert_eq!(v["n_buses"], 32);
    assert_eq!(v["X"].as_array().unwrap().len(), 32);
}

#[test]
fn malformed_csv_reports_row() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.csv", "from,to,r_ohm,x_ohm\n0,1,0.1,0.2\n1,2,abc,0.3\n");
    let o = run(&["build-net", "--branches", &bad, "--out", &p(dir.path(), "n.json")]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 2"));
    assert!(!dir.path().join("n.json").exists());
}

#[test]
fn matrix_network_round_trips_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", r#"{"X": [[0.20, -0.16], [-0.16, 0.97]]}"#);
    let a = p(dir.path(), "a.json");
    let b = p(dir.path(), "b.json");
    assert_eq!(code(&run(&["build-net", "--matrix", &m, "--out", &a])), 0);
    assert_eq!(code(&run(&["build-net", "--matrix", &a, "--out", &b])), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn optimize_bounds_on_three_bus() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", r#"{"X": [[0.20, -0.16], [-0.16, 0.97]]}"#);
    let out = p(dir.path(), "bounds.json");
    assert_eq!(code(&run(&["optimize-bounds", "--net", &m, "--out", &out])), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let k: Vec<f64> = serde_json::from_value(v["k"].clone()).unwrap();
    assert!((k[0] - 7.33).abs() < 0.01 * 7.33 && (k[1] - 1.51).abs() < 0.01 * 1.51, "{k:?}");
    assert_eq!(v["w"], serde_json::json!([1.0, 1.0]));

    let w = write(dir.path(), "w.json", "[1.0, -2.0]");
    let o = run(&["optimize-bounds", "--net", &m, "--weights", &w, "--out", &p(dir.path(), "x.json")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn certify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", r#"{"X": [[0.20, -0.16], [-0.16, 0.97]]}"#);
    let bounds = p(dir.path(), "b.json");
    assert_eq!(code(&run(&["optimize-bounds", "--net", &m, "--out", &bounds])), 0);
    let o = run(&["certify", "--net", &m, "--bounds", &bounds, "--samples", "500"]);
    assert_eq!(code(&o), 0);
    let rep: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(rep["rho"].as_f64().unwrap() < 1.0);

    // Corner profile of 3x the optimized caps: oracle eigenvalue of I - XD.
    let over = write(dir.path(), "s.json", "[22.0, 4.5]");
    let o = run(&["certify", "--net", &m, "--slopes", &over]);
    assert_eq!(code(&o), 1);
    let rep: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(rep["rho"].as_f64().unwrap() >= 1.0);
    assert_eq!(rep["stable"], false);

    let o = run(&["certify", "--net", &m, "--bounds", &bounds, "--samples", "0"]);
    assert_eq!(code(&o), 2);
    let o = run(&["certify", "--net", &m]);
    assert_eq!(code(&o), 2);
}

fn small_train(dir: &Path, net: &str, bounds: &str, out: &str, kind: &str) -> Output {
    let cfg = write(
        dir,
        "cfg.json",
        r#"{"episodes": 4, "batch": 6, "hidden": 4, "test_states": 5, "safety_states": 10, "checkpoint_every": 2}"#,
    );
    run(&["train", "--net", net, "--bounds", bounds, "--config", &cfg, "--type", kind, "--out", out])
}

#[test]
fn train_certify_eval_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let net = build33(d);
    let bounds = p(d, "bounds.json");
    assert_eq!(code(&run(&["optimize-bounds", "--net", &net, "--out", &bounds])), 0);
    let out = p(d, "run");
    let o = small_train(d, &net, &bounds, &out, "stacked_relu");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = PathBuf::from(&out);
    let log = fs::read_to_string(run_dir.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4 * 32);
    assert!(log.starts_with("episode,bus,mean_batch_cost,test_cost,lr,spectral_radius_check"));
    for ck in ["checkpoints/episode_0002.json", "checkpoints/episode_0004.json", "manifest.json", "report.json"] {
        assert!(run_dir.join(ck).exists(), "{ck}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let ck = run_dir.join("checkpoints/episode_0004.json").display().to_string();
    let o = run(&["certify", "--net", &net, "--controllers", &ck, "--samples", "50"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));

    let ev = p(d, "eval");
    let ctrls = run_dir.join("controllers.json").display().to_string();
    assert_eq!(code(&run(&["eval", "--net", &net, "--checkpoints", &ctrls, "--n-states", "7", "--out", &ev])), 0);
    let costs = fs::read_to_string(PathBuf::from(&ev).join("costs.csv")).unwrap();
    assert_eq!(costs.lines().count(), 8);
    assert!(costs.starts_with("rollout,total,bus_0,"));

    let states = p(d, "states.json");
    assert_eq!(code(&run(&["sample-states", "--net", &net, "--n", "3", "--seed", "4", "--out", &states])), 0);
    let st: Vec<Vec<f64>> = serde_json::from_str(&fs::read_to_string(&states).unwrap()).unwrap();
    assert_eq!((st.len(), st[0].len()), (3, 32));
    let ev2 = p(d, "eval2");
    assert_eq!(code(&run(&["eval", "--net", &net, "--checkpoints", &ctrls, "--test-states", &states, "--out", &ev2])), 0);

    let tr = p(d, "traj.csv");
    assert_eq!(code(&run(&["rollout", "--net", &net, "--controllers", &ctrls, "--horizon", "5", "--out", &tr])), 0);
    let traj = fs::read_to_string(&tr).unwrap();
    assert!(traj.starts_with("t,bus,v,u,cost_step"));
    assert_eq!(traj.lines().count(), 1 + 5 * 32);
}

#[test]
fn unconstrained_gain_rollout_hits_guard() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", r#"{"X": [[0.5]]}"#);
    let c = write(dir.path(), "c.json", r#"[{"type": "linear", "c": 10.0, "u_min": -1e9, "u_max": 1e9}]"#);
    let v0 = write(dir.path(), "v0.json", "[0.1]");
    let o = run(&["rollout", "--net", &m, "--controllers", &c, "--v0", &v0, "--out", &p(dir.path(), "t.csv")]);
    assert_eq!(code(&o), 1);
}

#[test]
fn thread_override() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", r#"{"X": [[0.5]]}"#);
    let out = p(dir.path(), "s.json");
    let ok = Command::new(BIN)
        .args(["sample-states", "--net", &m, "--n", "2", "--out", &out])
        .env("VOLTGRID_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&ok), 0);
    let bad = Command::new(BIN)
        .args(["sample-states", "--net", &m, "--n", "2", "--out", &out])
        .env("VOLTGRID_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
}

#[test]
fn mlp_training_runs_without_caps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let net = build33(d);
    let bounds = p(d, "bounds.json");
    assert_eq!(code(&run(&["optimize-bounds", "--net", &net, "--uniform", "--out", &bounds])), 0);
    let out = p(d, "mlp");
    let o = small_train(d, &net, &bounds, &out, "mlp");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(PathBuf::from(&out).join("log.csv")).unwrap();
    // No certificate column for the unconstrained type.
    assert!(log.lines().nth(1).unwrap().ends_with(','));
}
