//! Command implementations behind the `empc` binary.
//!
//! Every `cmd_*` function returns a process exit code: 0 on success, 1 on an
//! invariant or check violation, 2 on a configuration error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use empc_core::config::RawConfig;
use empc_core::diagnostics::{diagnose, Assumptions, DiagnosticsOptions, DiagnosticsReport};
use empc_core::error::{EmpcError, Result};
use empc_core::nlp::grad_check;
use empc_core::nlp::NlpProblem;
use empc_core::ocp::{build_ocp, ExperimentConfig};
use empc_core::simulate::{convergence_time, run_closed_loop, transient_average, write_trajectory_csv, ClosedLoopLog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Tolerance used for every convergence time in summaries.
pub const CONVERGENCE_TOL: f64 = 1e-3;
pub const GRADCHECK_TOL: f64 = 1e-5;
const GRADCHECK_POINTS: usize = 20;
const GRADCHECK_STEP: f64 = 1.0 / 1_048_576.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    pub trace: bool,
    pub probes: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { seed: 0, trace: false, probes: DiagnosticsOptions::default().probes }
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: ClosedLoopLog,
    pub report: DiagnosticsReport,
    pub convergence_time: Option<usize>,
    pub transient_average: f64,
    pub summary: String,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.report.invariant_violations.is_empty() {
            EXIT_OK
        } else {
            EXIT_VIOLATION
        }
    }
}

fn fmt_time(t: Option<usize>) -> String {
    t.map_or_else(|| "none".to_string(), |v| v.to_string())
}

pub fn load(path: &Path) -> Result<(RawConfig, ExperimentConfig)> {
    let raw = RawConfig::load(path)?;
    let cfg = raw.build()?;
    Ok((raw, cfg))
}

/// Simulates and diagnoses `cfg` without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    cfg.solver.trace = opts.trace;
    let log = run_closed_loop(&cfg)?;
    let report = diagnose(&log, &cfg, DiagnosticsOptions { probes: opts.probes, seed: opts.seed });
    let conv = convergence_time(&log, CONVERGENCE_TOL);
    let avg = transient_average(&log, log.steps.len())?;
    let summary = format!(
        "convergence_time={} transient_average={:?} final_average={:?} theorem2_margin={:?} \
         lyapunov_lower_margin={:?} lyapunov_upper_margin={:?} fallbacks={} violations={}",
        fmt_time(conv),
        avg,
        report.theorem2.final_average,
        report.theorem2.margin,
        report.corollary1.worst_lower_margin,
        report.corollary1.worst_upper_margin,
        report.fallback_steps.len(),
        report.invariant_violations.len()
    );
    Ok(RunOutcome { log, report, convergence_time: conv, transient_average: avg, summary })
}

/// Runs one configuration and writes `trajectory.csv`, `diagnostics.json` and
/// `summary.txt` into `out`.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    let outcome = execute(cfg, opts)?;
    fs::create_dir_all(out)?;
    write_trajectory_csv(&outcome.log, out.join("trajectory.csv"))?;
    outcome.report.write_json(out.join("diagnostics.json"))?;
    fs::write(out.join("summary.txt"), format!("{}\n", outcome.summary))?;
    if opts.trace {
        let mut text = String::new();
        for s in &outcome.log.steps {
            let _ = writeln!(text, "step {}\n{}", s.t, s.trace);
        }
        fs::write(out.join("solver_trace.txt"), text)?;
    }
    Ok(outcome)
}

fn config_error(e: &EmpcError) -> i32 {
    eprintln!("error: {e}");
    EXIT_CONFIG
}

pub fn cmd_run(config: &Path, out: &Path, opts: &RunOptions) -> i32 {
    let cfg = match load(config) {
        Ok((_, cfg)) => cfg,
        Err(e) => return config_error(&e),
    };
    match run_to_dir(&cfg, out, opts) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            for v in &outcome.report.invariant_violations {
                eprintln!("violation: {v}");
            }
            outcome.exit_code()
        }
        Err(e @ EmpcError::Config(_)) => config_error(&e),
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_VIOLATION
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    RhoWeight,
    ThetaBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Base configuration, relative to the spec file.
    pub base: PathBuf,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EmpcError::Config(format!("{}: {e}", path.display())))?;
        let mut spec: SweepSpec = toml::from_str(&text).map_err(|e| EmpcError::Config(e.to_string()))?;
        if spec.base.is_relative() {
            spec.base = path.parent().unwrap_or(Path::new(".")).join(&spec.base);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(EmpcError::Config("sweep needs at least one value".into()));
        }
        for &v in &self.values {
            let ok = match self.parameter {
                SweepParameter::RhoWeight => v.is_finite() && v >= 0.0,
                SweepParameter::ThetaBound => v.is_finite() && v > 0.0,
            };
            if !ok {
                return Err(EmpcError::Config(format!("invalid sweep value {v}")));
            }
        }
        Ok(())
    }

    /// The base configuration with the swept parameter set to `value`.
    pub fn apply(&self, base: &RawConfig, value: f64) -> Result<RawConfig> {
        let mut raw = base.clone();
        match self.parameter {
            SweepParameter::RhoWeight => raw.rho.weight = value,
            SweepParameter::ThetaBound => {
                if raw.storage.theta_lo.is_some() || raw.storage.theta_hi.is_some() {
                    return Err(EmpcError::Config("theta_bound sweep needs a config using theta_bound".into()));
                }
                raw.storage.theta_bound = Some(value);
            }
        }
        Ok(raw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub convergence_time: Option<usize>,
    pub transient_average: f64,
    pub theorem2_margin: f64,
    pub error: Option<String>,
}

/// Checks the expected monotone trend of a sweep. Ties are allowed.
pub fn sweep_trend(parameter: SweepParameter, rows: &[SweepRow]) -> std::result::Result<(), String> {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value));
    for w in sorted.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.error.is_some() || b.error.is_some() {
            return Err(format!("failed cell at value {}", if a.error.is_some() { a.value } else { b.value }));
        }
        match parameter {
            SweepParameter::RhoWeight => {
                let ta = a.convergence_time.unwrap_or(usize::MAX);
                let tb = b.convergence_time.unwrap_or(usize::MAX);
                if tb > ta {
                    return Err(format!("convergence time rises from {} to {} between {} and {}", fmt_time(a.convergence_time), fmt_time(b.convergence_time), a.value, b.value));
                }
                if b.transient_average < a.transient_average {
                    return Err(format!("transient average falls from {} to {} between {} and {}", a.transient_average, b.transient_average, a.value, b.value));
                }
            }
            SweepParameter::ThetaBound => {
                if b.transient_average > a.transient_average {
                    return Err(format!("transient average rises from {} to {} between {} and {}", a.transient_average, b.transient_average, a.value, b.value));
                }
            }
        }
    }
    Ok(())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("value,convergence_time,transient_average,theorem2_margin\n");
    for r in rows {
        let _ = writeln!(s, "{:?},{},{:?},{:?}", r.value, fmt_time(r.convergence_time), r.transient_average, r.theorem2_margin);
    }
    s
}

/// Runs every cell of `spec` on a pool of `jobs` workers (0 means one per core)
/// and writes one run directory per cell plus `sweep.csv`.
pub fn run_sweep(spec: &SweepSpec, out: &Path, jobs: usize, opts: &RunOptions) -> Result<Vec<SweepRow>> {
    let base = RawConfig::load(&spec.base)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| EmpcError::Config(e.to_string()))?;
    fs::create_dir_all(out)?;
    let rows: Vec<SweepRow> = pool.install(|| {
        spec.values
            .par_iter()
            .enumerate()
            .map(|(i, &value)| {
                let cell = spec.apply(&base, value).and_then(|raw| raw.build()).and_then(|cfg| run_to_dir(&cfg, &out.join(format!("cell_{i}")), opts));
                match cell {
                    Ok(o) => SweepRow {
                        value,
                        convergence_time: o.convergence_time,
                        transient_average: o.transient_average,
                        theorem2_margin: o.report.theorem2.margin,
                        error: None,
                    },
                    Err(e) => SweepRow {
                        value,
                        convergence_time: None,
                        transient_average: f64::NAN,
                        theorem2_margin: f64::NAN,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });
    fs::write(out.join("sweep.csv"), sweep_csv(&rows))?;
    Ok(rows)
}

pub fn cmd_sweep(spec_path: &Path, out: &Path, jobs: usize, opts: &RunOptions) -> i32 {
    let spec = match SweepSpec::load(spec_path) {
        Ok(s) => s,
        Err(e) => return config_error(&e),
    };
    let rows = match run_sweep(&spec, out, jobs, opts) {
        Ok(r) => r,
        Err(e @ EmpcError::Config(_)) => return config_error(&e),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VIOLATION;
        }
    };
    print!("{}", sweep_csv(&rows));
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("cell {} failed: {}", r.value, r.error.as_deref().unwrap_or_default());
    }
    match sweep_trend(spec.parameter, &rows) {
        Ok(()) => {
            println!("trend: ok");
            EXIT_OK
        }
        Err(msg) => {
            println!("trend: violated ({msg})");
            EXIT_VIOLATION
        }
    }
}

/// Structural and sampled assumption checks as printable text plus a pass flag.
pub fn verify_text(cfg: &ExperimentConfig, seed: u64) -> (String, bool) {
    let a = Assumptions::evaluate(cfg, seed);
    let mut s = String::new();
    let fam = &cfg.storage;
    let _ = writeln!(s, "storage: {} monomials, parameter box compact: {}", fam.num_params(), fam.theta_lo().iter().chain(fam.theta_hi()).all(|v| v.is_finite()));
    let _ = writeln!(s, "storage vanishes at steady state: {}", a.assumption6);
    let _ = writeln!(s, "dissipation enforced: {}", a.dissipation_enforced);
    let mut ok = true;
    for rep in [&a.assumption4, &a.assumption5] {
        let tag = if rep.vacuous { "vacuous pass" } else if rep.pass { "pass" } else { "FAIL" };
        let _ = writeln!(s, "{}: {} ({} points)", rep.assumption, tag, rep.points);
        for (cond, v) in &rep.worst {
            let _ = writeln!(s, "  {cond}: worst {v:e}");
        }
        for w in &rep.witnesses {
            let _ = writeln!(s, "  witness {}: x={:?} theta={:?} value={:e}", w.condition, w.x, w.theta, w.value);
        }
        for n in &rep.notes {
            let _ = writeln!(s, "  note: {n}");
        }
        ok &= rep.pass;
    }
    let _ = writeln!(s, "recursive feasibility assumptions: {}", a.recursive_feasibility());
    let _ = writeln!(s, "convergence assumptions: {}", a.convergence());
    let _ = writeln!(s, "stability assumptions: {}", a.stability());
    (s, ok)
}

pub fn cmd_verify(config: &Path, seed: u64) -> i32 {
    let cfg = match load(config) {
        Ok((_, cfg)) => cfg,
        Err(e) => return config_error(&e),
    };
    let (text, ok) = verify_text(&cfg, seed);
    print!("{text}");
    if ok {
        EXIT_OK
    } else {
        EXIT_VIOLATION
    }
}

/// Worst relative gradient error over `points` random points inside the
/// variable bounds. Unbounded coordinates are sampled in `[-1, 1]`.
pub fn gradcheck_problem(p: &NlpProblem, points: usize, seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, String::new());
    for _ in 0..points {
        let z: Vec<f64> = (0..p.num_vars)
            .map(|i| {
                let lo = if p.var_lo[i].is_finite() { p.var_lo[i] } else { -1.0 };
                let hi = if p.var_hi[i].is_finite() { p.var_hi[i] } else { 1.0 };
                if hi > lo {
                    let (a, b) = (lo + 0.01 * (hi - lo), hi - 0.01 * (hi - lo));
                    rng.gen_range(a..=b)
                } else {
                    lo
                }
            })
            .collect();
        let g = grad_check(p, &z, GRADCHECK_STEP);
        if g.max_rel_error > worst.0 || worst.1.is_empty() {
            worst = (g.max_rel_error, g.label);
        }
    }
    worst
}

pub fn gradcheck_config(cfg: &ExperimentConfig, seed: u64) -> Result<(f64, String)> {
    let ocp = build_ocp(cfg, &cfg.x0, &cfg.theta0)?;
    Ok(gradcheck_problem(&ocp.nlp, GRADCHECK_POINTS, seed))
}

pub fn gradcheck_report(worst: f64, label: &str) -> i32 {
    if worst <= GRADCHECK_TOL {
        println!("gradcheck ok: worst relative error {worst:e} ({label})");
        EXIT_OK
    } else {
        println!("gradcheck FAILED: worst relative error {worst:e} in {label}");
        EXIT_VIOLATION
    }
}

pub fn cmd_gradcheck(config: &Path, seed: u64) -> i32 {
    let cfg = match load(config) {
        Ok((_, cfg)) => cfg,
        Err(e) => return config_error(&e),
    };
    match gradcheck_config(&cfg, seed) {
        Ok((worst, label)) => gradcheck_report(worst, &label),
        Err(e) => config_error(&e),
    }
}
