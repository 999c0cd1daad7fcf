use std::fs;
use std::path::{Path, PathBuf};

use empc_cli::{
    cmd_gradcheck, cmd_run, cmd_sweep, cmd_verify, execute, gradcheck_config, gradcheck_problem, gradcheck_report,
    load, sweep_trend, verify_text, RunOptions, SweepParameter, SweepRow, EXIT_CONFIG, EXIT_OK, EXIT_VIOLATION,
};
use empc_core::{build_ocp, RawConfig};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn write_config(dir: &Path, name: &str, raw: &RawConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, toml::to_string(raw).unwrap()).unwrap();
    path
}

fn short(name: &str, steps: usize) -> RawConfig {
    let mut raw = RawConfig::load(config(name)).unwrap();
    raw.sim.steps = steps;
    raw
}

#[test]
fn zero_horizon_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut raw = short("quartic_eq_rho02.cfg", 5);
    raw.horizon.n = 0;
    let path = write_config(dir.path(), "bad.cfg", &raw);
    assert_eq!(cmd_run(&path, &dir.path().join("out"), &RunOptions::default()), EXIT_CONFIG);
    let err = load(&path).unwrap_err().to_string();
    assert!(err.contains("horizon must be ≥ 1"), "{err}");
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let code = cmd_run(&dir.path().join("nope.cfg"), &dir.path().join("out"), &RunOptions::default());
    assert_eq!(code, EXIT_CONFIG);
    assert_eq!(cmd_gradcheck(&dir.path().join("nope.cfg"), 0), EXIT_CONFIG);
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "pinned.cfg", &short("quartic_region_xs_pinned.cfg", 5));
    let out = dir.path().join("out");
    assert_eq!(cmd_run(&path, &out, &RunOptions::default()), EXIT_OK);
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(json["invariant_violations"].as_array().map(Vec::len), Some(0));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.starts_with("convergence_time=0 "), "{summary}");
}

#[test]
fn rotating_absxy_never_converges() {
    let cfg = short("absxy_rotating.cfg", 12).build().unwrap();
    let out = execute(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(out.exit_code(), EXIT_OK);
    assert!(out.summary.contains("convergence_time=none"), "{}", out.summary);
    assert!(out.log.stage_costs().iter().all(|&c| c >= -1e-9));
}

#[test]
fn single_value_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = write_config(dir.path(), "base.cfg", &short("quartic_region.cfg", 8));
    let spec = dir.path().join("sweep.toml");
    fs::write(&spec, "parameter = \"rho_weight\"\nvalues = [0.2]\nbase = \"base.cfg\"\n").unwrap();
    let opts = RunOptions::default();
    assert_eq!(cmd_sweep(&spec, &dir.path().join("sweep"), 1, &opts), EXIT_OK);
    assert_eq!(cmd_run(&base, &dir.path().join("run"), &opts), EXIT_OK);
    let a = fs::read(dir.path().join("sweep/cell_0/trajectory.csv")).unwrap();
    let b = fs::read(dir.path().join("run/trajectory.csv")).unwrap();
    assert_eq!(a, b);
    let table = fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("value,convergence_time,transient_average,theorem2_margin"));
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn invalid_sweep_spec_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("sweep.toml");
    fs::write(&spec, format!("parameter = \"theta_bound\"\nvalues = [0.0]\nbase = {:?}\n", config("quartic_eq_rho02.cfg"))).unwrap();
    assert_eq!(cmd_sweep(&spec, &dir.path().join("out"), 1, &RunOptions::default()), EXIT_CONFIG);
    fs::write(&spec, format!("parameter = \"rho_weight\"\nvalues = []\nbase = {:?}\n", config("quartic_eq_rho02.cfg"))).unwrap();
    assert_eq!(cmd_sweep(&spec, &dir.path().join("out"), 1, &RunOptions::default()), EXIT_CONFIG);
}

fn row(value: f64, conv: Option<usize>, avg: f64) -> SweepRow {
    SweepRow { value, convergence_time: conv, transient_average: avg, theorem2_margin: 0.0, error: None }
}

#[test]
fn sweep_trend_checks() {
    let good = [row(0.2, Some(70), -0.01), row(0.05, Some(99), -0.03), row(0.1, Some(80), -0.02)];
    assert!(sweep_trend(SweepParameter::RhoWeight, &good).is_ok());
    let slower = [row(0.05, Some(50), -0.03), row(0.1, Some(80), -0.02)];
    assert!(sweep_trend(SweepParameter::RhoWeight, &slower).unwrap_err().contains("convergence time"));
    let never = [row(0.05, Some(50), -0.03), row(0.1, None, -0.02)];
    assert!(sweep_trend(SweepParameter::RhoWeight, &never).is_err());
    let richer = [row(1.0, None, 0.01), row(5.0, None, -0.01)];
    assert!(sweep_trend(SweepParameter::ThetaBound, &richer).is_ok());
    assert!(sweep_trend(SweepParameter::ThetaBound, &[row(1.0, None, -0.01), row(5.0, None, 0.01)]).is_err());
    let mut failed = row(5.0, None, f64::NAN);
    failed.error = Some("boom".into());
    assert!(sweep_trend(SweepParameter::ThetaBound, &[row(1.0, None, 0.0), failed]).is_err());
}

#[test]
fn verify_outcomes() {
    assert_eq!(cmd_verify(&config("quartic_region.cfg"), 0), EXIT_OK);
    assert_eq!(cmd_verify(&config("quartic_region_rho10.cfg"), 0), EXIT_VIOLATION);
    let (_, cfg) = load(&config("quartic_region_rho10.cfg")).unwrap();
    let (text, ok) = verify_text(&cfg, 0);
    assert!(!ok);
    assert!(text.contains("witness"), "{text}");
    let (_, cfg) = load(&config("quartic_eq_rho02.cfg")).unwrap();
    let (text, ok) = verify_text(&cfg, 0);
    assert!(ok);
    assert_eq!(text.matches("vacuous pass").count(), 2, "{text}");
}

#[test]
fn gradcheck_shipped_configs() {
    for entry in fs::read_dir(config("")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "cfg") {
            assert_eq!(cmd_gradcheck(&path, 0), EXIT_OK, "{}", path.display());
        }
    }
}

#[test]
fn gradcheck_nearly_linear_problem() {
    let mut raw = RawConfig::load(config("quartic_region_zero_theta.cfg")).unwrap();
    raw.rho.weight = 0.0;
    let (worst, label) = gradcheck_config(&raw.build().unwrap(), 3).unwrap();
    assert!(worst <= 1e-8, "{worst} at {label}");
}

#[test]
fn gradcheck_names_corrupted_row() {
    let (_, cfg) = load(&config("quartic_eq_rho02.cfg")).unwrap();
    let mut ocp = build_ocp(&cfg, &cfg.x0, &cfg.theta0).unwrap();
    let row = ocp.nlp.ineq.iter_mut().find(|r| r.label == "dissipation k=7").unwrap();
    let inner = std::mem::replace(&mut row.func, Box::new(|_, _| 0.0));
    row.func = Box::new(move |z, g| {
        let start = g.len();
        let v = inner(z, g);
        for e in &mut g[start..] {
            e.1 *= 1.5;
        }
        v
    });
    let (worst, label) = gradcheck_problem(&ocp.nlp, 5, 0);
    assert!(worst > 1e-2, "{worst}");
    assert_eq!(label, "dissipation k=7");
    assert_eq!(gradcheck_report(worst, &label), EXIT_VIOLATION);
}
