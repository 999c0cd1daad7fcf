//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use empc_cli::{cmd_run, execute, gradcheck_config, load, run_sweep, sweep_trend, RunOptions, RunOutcome, SweepSpec, GRADCHECK_TOL};
use empc_core::diagnostics::rotated_stage;
use empc_core::model::rotator_constraints;
use empc_core::{dissipation_residual, orbit_average_cost, solve_steady_state, ExperimentConfig, StageCost, SystemModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cfg(name: &str) -> ExperimentConfig {
    load(&configs().join(name)).unwrap_or_else(|e| panic!("{name}: {e}")).1
}

fn run(name: &str) -> (RunOutcome, Duration) {
    let start = Instant::now();
    let out = execute(&cfg(name), &RunOptions::default()).unwrap_or_else(|e| panic!("{name}: {e}"));
    (out, start.elapsed())
}

struct Tally {
    failed: Vec<&'static str>,
}

impl Tally {
    fn report(&mut self, name: &'static str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(name);
        }
    }
}

fn theorem2_ok(o: &RunOutcome) -> bool {
    let t = &o.report.theorem2;
    t.final_average <= t.steady_cost + t.epsilon
}

fn max_identity_mismatch(o: &RunOutcome) -> f64 {
    o.log.steps.iter().map(|s| (s.rotated_value - s.rotated_value_direct).abs()).fold(0.0, f64::max)
}

fn main() {
    let mut tally = Tally { failed: Vec::new() };

    // orbit average of the uncontrolled rotator
    let start = Instant::now();
    let sys = SystemModel::rotator();
    let quartic = StageCost::named("quartic").unwrap();
    let avg = orbit_average_cost(&sys, &quartic, &[0.5, 0.0], 4).unwrap();
    let elapsed = start.elapsed();
    let orbit = [[0.5, 0.0], [0.0, -0.5], [-0.5, 0.0], [0.0, 0.5]];
    let hand = orbit.iter().map(|x| quartic.eval(x, &[0.0])).sum::<f64>() / 4.0;
    tally.report(
        "orbit_average",
        avg < 0.0 && (avg - hand).abs() <= 1e-12 && (avg + 0.03125).abs() <= 1e-12 && elapsed < Duration::from_millis(1),
        format!("average {avg:e}, hand sum {hand:e}, {elapsed:?}"),
    );

    let start = Instant::now();
    let ss = solve_steady_state(&sys, &quartic, &rotator_constraints()).unwrap();
    let elapsed = start.elapsed();
    let xs_inf = ss.xs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let us_inf = ss.us.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    tally.report(
        "steady_state",
        xs_inf <= 1e-6 && us_inf <= 1e-6 && ss.ls.abs() <= 1e-9 && elapsed < Duration::from_secs(1),
        format!("|xs|={xs_inf:e} |us|={us_inf:e} ls={:e}, {elapsed:?}", ss.ls),
    );

    let (eq, eq_time) = run("quartic_eq_rho02.cfg");
    let warm_ok = eq.log.steps.iter().skip(1).all(|s| s.warm_feasible);
    let worst_warm = eq.log.steps.iter().skip(1).map(|s| s.warmstart_margin).fold(f64::NEG_INFINITY, f64::max);
    tally.report(
        "recursive_feasibility",
        warm_ok && worst_warm <= 1e-8 && eq_time < Duration::from_secs(120),
        format!("warm start feasible at every step: {warm_ok}, worst residual {worst_warm:e}, {eq_time:?}"),
    );

    let states = eq.log.states();
    let tail = states[90..].iter().map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
    let th1 = &eq.report.theorem1;
    tally.report(
        "asymptotic_convergence",
        tail <= 1e-3 && th1.descent_ok,
        format!("max |x_t| for t>=90 {tail:e}, worst descent margin {:e}", th1.worst_descent_margin),
    );

    let tmp = tempfile::tempdir().unwrap();
    let opts = RunOptions::default();
    let rho_spec = SweepSpec::load(&configs().join("sweep_rho.toml")).unwrap();
    let rho_rows = run_sweep(&rho_spec, &tmp.path().join("rho"), 1, &opts).unwrap();
    let theta_spec = SweepSpec::load(&configs().join("sweep_theta_bound.toml")).unwrap();
    let theta_rows = run_sweep(&theta_spec, &tmp.path().join("theta"), 1, &opts).unwrap();
    let rho_trend = sweep_trend(rho_spec.parameter, &rho_rows);
    let theta_trend = sweep_trend(theta_spec.parameter, &theta_rows);
    let cells = |rows: &[empc_cli::SweepRow]| {
        rows.iter()
            .map(|r| format!("{}:({},{:.5})", r.value, r.convergence_time.map_or("none".into(), |t| t.to_string()), r.transient_average))
            .collect::<Vec<_>>()
            .join(" ")
    };
    tally.report(
        "sweep_trends",
        rho_trend.is_ok() && theta_trend.is_ok(),
        format!(
            "rho [{}] {:?}; theta_bound [{}] {:?}",
            cells(&rho_rows),
            rho_trend.err().unwrap_or_else(|| "ok".into()),
            cells(&theta_rows),
            theta_trend.err().unwrap_or_else(|| "ok".into())
        ),
    );

    let (region, _) = run("quartic_region.cfg");
    let (absxy, _) = run("absxy_rotating.cfg");
    let min_stage = absxy.log.stage_costs().into_iter().fold(f64::INFINITY, f64::min);
    let t2 = &absxy.report.theorem2;
    let absxy_ok = theorem2_ok(&absxy) && min_stage >= -1e-9 && t2.final_average.abs() <= t2.epsilon;
    tally.report(
        "average_performance",
        theorem2_ok(&eq) && theorem2_ok(&region) && absxy_ok,
        format!(
            "equality {:e} (eps {:e}), region {:e} (eps {:e}), absxy {:e} (eps {:e}, min stage {min_stage:e})",
            eq.report.theorem2.final_average,
            eq.report.theorem2.epsilon,
            region.report.theorem2.final_average,
            region.report.theorem2.epsilon,
            t2.final_average,
            t2.epsilon
        ),
    );

    let (pinned, _) = run("quartic_region_xs_pinned.cfg");
    let (free, _) = run("quartic_region_xs_free.cfg");
    let (dev_pinned, dev_free) = (pinned.log.max_deviation(), free.log.max_deviation());
    tally.report(
        "stability_from_steady_state",
        dev_pinned <= 1e-4 && dev_free >= 0.05,
        format!("max deviation pinned {dev_pinned:e}, free {dev_free:e}"),
    );

    let (zero, _) = run("quartic_region_zero_theta.cfg");
    let final_norm = |o: &RunOutcome| o.log.final_state.iter().map(|v| v * v).sum::<f64>().sqrt();
    tally.report(
        "free_vs_pinned_storage",
        region.transient_average <= zero.transient_average && final_norm(&region) <= 1e-3 && final_norm(&zero) <= 1e-3,
        format!(
            "free {:e} vs pinned {:e}, final |x| {:e} and {:e}",
            region.transient_average,
            zero.transient_average,
            final_norm(&region),
            final_norm(&zero)
        ),
    );

    let scenarios = [&eq, &region, &absxy, &pinned, &free, &zero];
    let worst_run = scenarios.iter().map(|o| max_identity_mismatch(o)).fold(0.0, f64::max);
    let c = cfg("quartic_region.cfg");
    let p = c.storage.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_tuple = 0.0f64;
    for _ in 0..10_000 {
        let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let u = vec![rng.gen_range(-1.0..=1.0)];
        let mut th: Vec<f64> = (0..p).map(|i| rng.gen_range(c.storage.theta_lo()[i]..=c.storage.theta_hi()[i])).collect();
        let mut thp: Vec<f64> = (0..p).map(|i| rng.gen_range(c.storage.theta_lo()[i]..=c.storage.theta_hi()[i])).collect();
        c.storage.apply_pins(&mut th);
        c.storage.apply_pins(&mut thp);
        let xn = c.system.step(&x, &u).unwrap();
        let l = rotated_stage(&c, &th, &thp, &x, &u).unwrap();
        let r = dissipation_residual(&c.storage, &c.rho, &c.cost, &c.steady, &th, &thp, &x, &u, &xn).unwrap();
        let rho = c.rho.eval_offset(&x, &c.steady.xs);
        let scale = 1.0 + l.abs() + r.abs() + rho;
        worst_tuple = worst_tuple.max((l + r - rho).abs() / scale);
    }
    tally.report(
        "rotated_identity",
        worst_run <= 1e-8 && worst_tuple <= 1e-13,
        format!("worst per-step mismatch {worst_run:e}, worst relative tuple error {worst_tuple:e}"),
    );

    let mut grad_worst = (0.0f64, String::new());
    let mut names: Vec<PathBuf> = fs::read_dir(configs())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "cfg"))
        .collect();
    names.sort();
    for path in &names {
        let (_, c) = load(path).unwrap();
        let (w, label) = gradcheck_config(&c, 0).unwrap();
        if w > grad_worst.0 || grad_worst.1.is_empty() {
            grad_worst = (w, format!("{} {label}", path.file_name().unwrap().to_string_lossy()));
        }
    }
    let eq_path = configs().join("quartic_eq_rho02.cfg");
    let codes = [cmd_run(&eq_path, &tmp.path().join("a"), &opts), cmd_run(&eq_path, &tmp.path().join("b"), &opts)];
    let a = fs::read(tmp.path().join("a/trajectory.csv")).unwrap_or_default();
    let b = fs::read(tmp.path().join("b/trajectory.csv")).unwrap_or_default();
    tally.report(
        "solver_hygiene",
        grad_worst.0 <= GRADCHECK_TOL && codes == [0, 0] && !a.is_empty() && a == b,
        format!(
            "gradcheck worst {:e} over {} configs ({}), repeated runs identical: {}",
            grad_worst.0,
            names.len(),
            grad_worst.1,
            !a.is_empty() && a == b
        ),
    );

    if !tally.failed.is_empty() {
        eprintln!("failed: {}", tally.failed.join(", "));
        std::process::exit(1);
    }
}
