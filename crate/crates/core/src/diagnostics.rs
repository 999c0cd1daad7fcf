//! Runtime checks of the closed-loop guarantees on a finished log.
//!
//! Each check states the assumptions it relies on. A failed check is an
//! invariant violation only when those assumptions hold; otherwise it is
//! reported as "assumption unmet".

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ocp::{
    build_ocp, sample_region, solve_ocp, trajectory_value, verify_assumption4, verify_assumption5, AssumptionReport,
    ExperimentConfig, OcpSolutionTriple, TerminalMode,
};
use crate::simulate::{ClosedLoopLog, StepRecord};

pub const IDENTITY_FLAG_TOL: f64 = 1e-6;
pub const DESCENT_TOL: f64 = 1e-6;
pub const PROP1_TOL: f64 = 1e-8;
const ASSUMPTION_TOL: f64 = 1e-9;

/// `L(θ, θ⁺, x, u) = ℓ(x, u) + λ(θ, x) − λ(θ⁺, f(x, u)) − ℓ(xs, us)`.
pub fn rotated_stage(cfg: &ExperimentConfig, theta: &[f64], theta_plus: &[f64], x: &[f64], u: &[f64]) -> Result<f64> {
    cfg.storage.check_theta(theta)?;
    cfg.storage.check_theta(theta_plus)?;
    let xn = cfg.system.step(x, u)?;
    Ok(rotated_stage_unchecked(cfg, theta, theta_plus, x, u, &xn))
}

fn rotated_stage_unchecked(cfg: &ExperimentConfig, th: &[f64], thp: &[f64], x: &[f64], u: &[f64], xn: &[f64]) -> f64 {
    cfg.cost.eval(x, u) + cfg.storage.eval_unchecked(th, x) - cfg.storage.eval_unchecked(thp, xn) - cfg.steady.ls
}

/// Telescoped `V_N − N·ℓ(xs,us) + λ(θ_t, x_t)` and the direct sum of rotated
/// stages plus the rotated terminal cost `V_f(x_N) + λ(θ_N, x_N)`.
pub(crate) fn rotated_value_parts(
    cfg: &ExperimentConfig,
    plan: &OcpSolutionTriple,
    x_t: &[f64],
    theta_t: &[f64],
) -> (f64, f64) {
    let n = plan.u_seq.len();
    let telescoped = plan.value - n as f64 * cfg.steady.ls + cfg.storage.eval_unchecked(theta_t, x_t);
    let mut direct = 0.0;
    for k in 0..n {
        let xn = cfg.system.step_unchecked(&plan.x_seq[k], &plan.u_seq[k]);
        direct += rotated_stage_unchecked(cfg, &plan.theta_seq[k], &plan.theta_seq[k + 1], &plan.x_seq[k], &plan.u_seq[k], &xn);
    }
    let xn = &plan.x_seq[n];
    direct += cfg.terminal.vf(xn) + cfg.storage.eval_unchecked(&plan.theta_seq[n], xn);
    (telescoped, direct)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedValue {
    pub telescoped: f64,
    pub direct: f64,
    pub mismatch: f64,
    pub identity_violation: bool,
}

pub fn rotated_value(record: &StepRecord, cfg: &ExperimentConfig) -> RotatedValue {
    let (telescoped, direct) = rotated_value_parts(cfg, &record.plan, &record.x, &record.theta);
    let mismatch = (telescoped - direct).abs();
    RotatedValue { telescoped, direct, mismatch, identity_violation: mismatch > IDENTITY_FLAG_TOL }
}

/// Outcome of the assumption checks the theorem reports are gated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assumptions {
    pub assumption4: AssumptionReport,
    pub assumption5: AssumptionReport,
    pub assumption6: bool,
    pub dissipation_enforced: bool,
    pub region_mode: bool,
}

impl Assumptions {
    pub fn evaluate(cfg: &ExperimentConfig, seed: u64) -> Self {
        Assumptions {
            assumption4: verify_assumption4(&cfg.terminal, cfg, 1000, seed),
            assumption5: verify_assumption5(cfg, 200, 50, seed),
            assumption6: cfg.storage.vanishes_at(&cfg.steady.xs),
            dissipation_enforced: cfg.enforce_dissipation,
            region_mode: cfg.terminal.mode() == TerminalMode::Region,
        }
    }

    fn a4(&self, cond: &str) -> bool {
        self.assumption4.worst_of(cond).is_none_or(|v| v <= ASSUMPTION_TOL)
    }

    /// Terminal state-input and invariance conditions plus dissipation under the
    /// terminal policy, with dissipation rows enforced.
    pub fn recursive_feasibility(&self) -> bool {
        self.dissipation_enforced && self.a4("(i) state-input") && self.a4("(ii) invariance") && self.assumption5.pass
    }

    /// Assumption set of the convergence and average-performance results.
    pub fn convergence(&self) -> bool {
        self.recursive_feasibility() && self.a4("(iii) decrease")
    }

    /// Adds a storage vanishing at the steady state and region mode, as needed for
    /// the Lyapunov bounds.
    pub fn stability(&self) -> bool {
        self.convergence() && self.assumption6 && self.region_mode
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub applicable: bool,
    pub worst_margin: f64,
    pub worst_step: Option<usize>,
    pub ok: bool,
}

pub fn verify_prop1(log: &ClosedLoopLog, gate: &Assumptions) -> Prop1Report {
    let mut worst = f64::NEG_INFINITY;
    let mut worst_step = None;
    for s in log.steps.iter().skip(1) {
        if s.warmstart_margin > worst {
            worst = s.warmstart_margin;
            worst_step = Some(s.t);
        }
    }
    let ok = log.steps.len() <= 1 || worst <= PROP1_TOL;
    Prop1Report { applicable: gate.recursive_feasibility(), worst_margin: worst.max(0.0), worst_step, ok }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub applicable: bool,
    /// `min_t [−ρ(x_{t−1} − xs) − (V̄_t − V̄_{t−1})]`; the check needs ≥ −1e-6.
    pub worst_descent_margin: f64,
    pub worst_step: Option<usize>,
    pub descent_ok: bool,
    pub rho_total: f64,
    pub rho_tail: f64,
    pub tail_ok: bool,
    pub final_distance: f64,
    pub pass: bool,
}

pub fn verify_theorem1(log: &ClosedLoopLog, cfg: &ExperimentConfig, gate: &Assumptions) -> Theorem1Report {
    let mut worst = f64::INFINITY;
    let mut worst_step = None;
    for w in log.steps.windows(2) {
        let rho = cfg.rho.eval_offset(&w[0].x, &cfg.steady.xs);
        let margin = -rho - (w[1].rotated_value - w[0].rotated_value);
        if margin < worst {
            worst = margin;
            worst_step = Some(w[1].t);
        }
    }
    let descent_ok = worst_step.is_none() || worst >= -DESCENT_TOL;
    let states = log.states();
    let rhos: Vec<f64> = states.iter().map(|x| cfg.rho.eval_offset(x, &cfg.steady.xs)).collect();
    let total: f64 = rhos.iter().sum();
    let tail_start = states.len() - states.len() / 5;
    let tail: f64 = rhos[tail_start..].iter().sum();
    let tail_ok = total == 0.0 || tail <= 0.05 * total;
    let final_distance = log.final_state.iter().zip(&cfg.steady.xs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Theorem1Report {
        applicable: gate.convergence() && log.steps.iter().skip(1).all(|s| s.warm_feasible),
        worst_descent_margin: if worst.is_finite() { worst } else { 0.0 },
        worst_step,
        descent_ok,
        rho_total: total,
        rho_tail: tail,
        tail_ok,
        final_distance,
        pass: descent_ok && tail_ok,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corollary1Report {
    pub applicable: bool,
    /// `min_t [V̄_t − ρ(x_t − xs)]`.
    pub worst_lower_margin: f64,
    pub lower_ok: bool,
    /// `min over probes [V̄_f(θ, x) − V̄_N(θ, x)]`.
    pub worst_upper_margin: f64,
    pub upper_ok: bool,
    pub probes_run: usize,
    pub probes_skipped: usize,
    pub pass: bool,
}

/// Lower Lyapunov bound along the log and upper bound at `probes` fresh solves on
/// `X_f`. Probes only run when the stability assumption set holds.
pub fn verify_corollary1(
    log: &ClosedLoopLog,
    cfg: &ExperimentConfig,
    gate: &Assumptions,
    probes: usize,
    seed: u64,
) -> Corollary1Report {
    let lower = log
        .steps
        .iter()
        .map(|s| s.rotated_value - cfg.rho.eval_offset(&s.x, &cfg.steady.xs))
        .fold(f64::INFINITY, f64::min);
    let lower = if lower.is_finite() { lower } else { 0.0 };
    let lower_ok = lower >= -DESCENT_TOL;
    let applicable = gate.stability();

    let mut upper = f64::INFINITY;
    let mut run = 0;
    let mut skipped = 0;
    if applicable && probes > 0 && !log.steps.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
        let mut points = vec![cfg.steady.xs.clone()];
        points.extend(sample_region(&cfg.terminal, probes.saturating_sub(1), &mut rng));
        for (i, x) in points.iter().enumerate() {
            let theta = &log.steps[i % log.steps.len()].theta;
            match probe_upper(cfg, x, theta) {
                Some(m) => {
                    run += 1;
                    upper = upper.min(m);
                }
                None => skipped += 1,
            }
        }
    }
    let upper = if upper.is_finite() { upper } else { 0.0 };
    let upper_ok = upper >= -DESCENT_TOL;
    Corollary1Report {
        applicable,
        worst_lower_margin: lower,
        lower_ok,
        worst_upper_margin: upper,
        upper_ok,
        probes_run: run,
        probes_skipped: skipped,
        pass: lower_ok && upper_ok,
    }
}

/// `V̄_f(θ, x) − V̄_N(θ, x)` from a fresh solve warm-started on the terminal-policy
/// rollout, or `None` when the solve fails.
fn probe_upper(cfg: &ExperimentConfig, x: &[f64], theta: &[f64]) -> Option<f64> {
    let ocp = build_ocp(cfg, x, theta).ok()?;
    let mut x_seq = vec![x.to_vec()];
    let mut u_seq = Vec::with_capacity(cfg.horizon);
    for k in 0..cfg.horizon {
        let u = cfg.terminal.kappa(&x_seq[k]);
        x_seq.push(cfg.system.step_unchecked(&x_seq[k], &u));
        u_seq.push(u);
    }
    let value = trajectory_value(cfg, &x_seq, &u_seq);
    let warm = OcpSolutionTriple { x_seq, u_seq, theta_seq: vec![theta.to_vec(); cfg.horizon + 1], value };
    let sol = solve_ocp(cfg, &ocp, &warm, None).ok()?;
    if !sol.nlp.status.is_feasible() {
        return None;
    }
    let lam = cfg.storage.eval_unchecked(theta, x);
    let v = trajectory_value(cfg, &sol.triple.x_seq, &sol.triple.u_seq);
    let vbar = v - cfg.horizon as f64 * cfg.steady.ls + lam;
    Some(cfg.terminal.vf(x) + lam - vbar)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub applicable: bool,
    pub final_average: f64,
    pub steady_cost: f64,
    pub epsilon: f64,
    /// `ℓ(xs, us) − final running average`; the bound needs ≥ −ε.
    pub margin: f64,
    pub pass: bool,
}

/// Final running average against `ℓ(xs, us) + ε`, `ε = 10·stat_tol + 2·|V_N(0)|/T`.
pub fn verify_theorem2(log: &ClosedLoopLog, cfg: &ExperimentConfig, gate: &Assumptions) -> Theorem2Report {
    let t = log.steps.len().max(1) as f64;
    let v0 = log.steps.first().map(|s| s.value).unwrap_or(0.0);
    let epsilon = 10.0 * cfg.solver.stationarity_tol + 2.0 * v0.abs() / t;
    let avg = log.final_running_average();
    let margin = cfg.steady.ls - avg;
    Theorem2Report {
        applicable: gate.convergence(),
        final_average: avg,
        steady_cost: cfg.steady.ls,
        epsilon,
        margin,
        pass: margin >= -epsilon,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub config_hash: String,
    pub vbar_series: Vec<f64>,
    pub vbar_monotone: bool,
    pub worst_vbar_increase: f64,
    pub rotated_identity_max_mismatch: f64,
    pub avg_bound_margin: f64,
    pub dissipation_ok: bool,
    pub max_dissipation_residual: f64,
    pub lyapunov_lower_ok: bool,
    pub lyapunov_upper_ok: bool,
    pub prop1_ok: bool,
    pub assumptions: Assumptions,
    pub prop1: Prop1Report,
    pub theorem1: Theorem1Report,
    pub corollary1: Corollary1Report,
    pub theorem2: Theorem2Report,
    pub fallback_steps: Vec<usize>,
    /// Failed checks whose assumptions hold, plus runtime flags from the log.
    pub invariant_violations: Vec<String>,
}

impl DiagnosticsReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| crate::error::EmpcError::Io(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiagnosticsOptions {
    pub probes: usize,
    pub seed: u64,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        DiagnosticsOptions { probes: 10, seed: 0 }
    }
}

pub fn diagnose(log: &ClosedLoopLog, cfg: &ExperimentConfig, opts: DiagnosticsOptions) -> DiagnosticsReport {
    let gate = Assumptions::evaluate(cfg, opts.seed);
    let vbar: Vec<f64> = log.steps.iter().map(|s| s.rotated_value).collect();
    let worst_inc = vbar.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let worst_inc = if worst_inc.is_finite() { worst_inc } else { 0.0 };
    let mismatch = log
        .steps
        .iter()
        .map(|s| (s.rotated_value - s.rotated_value_direct).abs())
        .fold(0.0, f64::max);
    let max_diss = log.steps.iter().map(|s| s.max_diss_residual).fold(f64::NEG_INFINITY, f64::max);

    let prop1 = verify_prop1(log, &gate);
    let theorem1 = verify_theorem1(log, cfg, &gate);
    let corollary1 = verify_corollary1(log, cfg, &gate, opts.probes, opts.seed);
    let theorem2 = verify_theorem2(log, cfg, &gate);

    let mut violations = log.flags.clone();
    if mismatch > IDENTITY_FLAG_TOL {
        violations.push(format!("rotated value identity mismatch {mismatch:e}"));
    }
    if prop1.applicable && !prop1.ok {
        violations.push(format!("shifted warm start infeasible at step {:?} ({:e})", prop1.worst_step, prop1.worst_margin));
    }
    if theorem1.applicable && !theorem1.descent_ok {
        violations.push(format!(
            "rotated value descent fails at step {:?} (margin {:e})",
            theorem1.worst_step, theorem1.worst_descent_margin
        ));
    }
    if corollary1.applicable && !corollary1.pass {
        violations.push(format!(
            "Lyapunov bounds fail (lower {:e}, upper {:e})",
            corollary1.worst_lower_margin, corollary1.worst_upper_margin
        ));
    }
    if theorem2.applicable && !theorem2.pass {
        violations.push(format!("average cost bound fails (margin {:e}, ε {:e})", theorem2.margin, theorem2.epsilon));
    }

    DiagnosticsReport {
        config_hash: log.config_hash.clone(),
        vbar_monotone: worst_inc <= DESCENT_TOL,
        worst_vbar_increase: worst_inc,
        vbar_series: vbar,
        rotated_identity_max_mismatch: mismatch,
        avg_bound_margin: theorem2.margin,
        dissipation_ok: !cfg.enforce_dissipation || max_diss <= 1e-6,
        max_dissipation_residual: max_diss,
        lyapunov_lower_ok: corollary1.lower_ok,
        lyapunov_upper_ok: corollary1.upper_ok,
        prop1_ok: prop1.ok,
        fallback_steps: log.steps.iter().filter(|s| s.fell_back).map(|s| s.t).collect(),
        assumptions: gate,
        prop1,
        theorem1,
        corollary1,
        theorem2,
        invariant_violations: violations,
    }
}
