//! Receding-horizon closed loop `x_{t+1} = f(x_t, u*_{t|t})`, `θ_{t+1} = θ*_{t+1|t}`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::rotated_value_parts;
use crate::error::{EmpcError, Result};
use crate::model::{constraint_residuals, SteadyState};
use crate::nlp::{format_trace, SolveStatus};
use crate::ocp::{
    build_ocp, cold_start, shift_multipliers, shift_warm_start, solve_ocp, trajectory_value, validate_candidate,
    ExperimentConfig, Ocp, OcpSolutionTriple, CANDIDATE_TOL,
};
use crate::storage::dissipation_residual_unchecked;

const DISSIPATION_LOG_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    /// `θ_{t|t}`.
    pub theta: Vec<f64>,
    /// `θ*_{t+1|t}`, the next initial condition.
    pub theta_next: Vec<f64>,
    pub stage_cost: f64,
    pub running_avg: f64,
    pub value: f64,
    pub rotated_value: f64,
    pub rotated_value_direct: f64,
    pub max_diss_residual: f64,
    /// Largest constraint residual of the warm start (≤ 0 up to tolerance means feasible).
    pub warmstart_margin: f64,
    pub warm_value: f64,
    pub warm_feasible: bool,
    pub solver_status: SolveStatus,
    pub solver_iters: usize,
    /// The solver result was rejected and the warm start applied instead.
    pub fell_back: bool,
    pub plan: OcpSolutionTriple,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopLog {
    pub config_hash: String,
    pub steady: SteadyState,
    pub horizon: usize,
    pub steps: Vec<StepRecord>,
    pub final_state: Vec<f64>,
    pub final_theta: Vec<f64>,
    /// Invariant violations observed while running.
    pub flags: Vec<String>,
}

impl ClosedLoopLog {
    /// `x_0, …, x_T`.
    pub fn states(&self) -> Vec<Vec<f64>> {
        let mut v: Vec<Vec<f64>> = self.steps.iter().map(|s| s.x.clone()).collect();
        v.push(self.final_state.clone());
        v
    }

    pub fn stage_costs(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.stage_cost).collect()
    }

    pub fn final_running_average(&self) -> f64 {
        self.steps.last().map(|s| s.running_avg).unwrap_or(0.0)
    }

    /// `max_t ‖x_t − xs‖₂` over `x_0, …, x_T`.
    pub fn max_deviation(&self) -> f64 {
        self.states().iter().map(|x| dist(x, &self.steady.xs)).fold(0.0, f64::max)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn accept(status: SolveStatus, value: f64, warm_value: f64, warm_feasible: bool) -> bool {
    match status {
        SolveStatus::Optimal => true,
        SolveStatus::FeasibleSuboptimal => !warm_feasible || value <= warm_value,
        _ => false,
    }
}

/// Runs `cfg.steps` receding-horizon steps from `(x0, θ0)`.
pub fn run_closed_loop(cfg: &ExperimentConfig) -> Result<ClosedLoopLog> {
    cfg.validate()?;
    let n_h = cfg.horizon;
    let mut x = cfg.x0.clone();
    let mut theta = cfg.theta0.clone();
    let mut prev: Option<(Ocp, OcpSolutionTriple, crate::nlp::Multipliers)> = None;
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut flags = Vec::new();
    let mut total = 0.0;

    for t in 0..cfg.steps {
        let fail = |e: EmpcError| EmpcError::StepFailure { step: t, source: Box::new(e) };
        let ocp = build_ocp(cfg, &x, &theta).map_err(fail)?;
        let (warm, mult) = match &prev {
            None => (cold_start(cfg, &x, &theta).map_err(fail)?.0, None),
            Some((p_ocp, p_plan, p_mult)) => {
                let m = cfg.warm_multipliers.then(|| shift_multipliers(p_ocp, p_mult, &ocp));
                (shift_warm_start(p_plan, cfg), m)
            }
        };
        let report = validate_candidate(&warm, cfg, &x, &theta, CANDIDATE_TOL);

        let sol = solve_ocp(cfg, &ocp, &warm, mult.as_ref()).map_err(fail)?;
        let solved_value = trajectory_value(cfg, &sol.triple.x_seq, &sol.triple.u_seq);
        let use_solution = accept(sol.nlp.status, solved_value, warm.value, report.feasible) || !report.feasible;
        let (plan, fell_back) = if use_solution {
            let mut p = sol.triple.clone();
            p.value = solved_value;
            (p, false)
        } else {
            (warm.clone(), true)
        };
        if !fell_back && !sol.nlp.status.is_feasible() {
            flags.push(format!("step {t}: no feasible plan (solver status {})", sol.nlp.status));
        }

        let u = plan.u_seq[0].clone();
        let stage_cost = cfg.cost.eval(&x, &u);
        total += stage_cost;
        let worst_z = constraint_residuals(&cfg.constraints, &x, &u)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
        if worst_z > CANDIDATE_TOL {
            flags.push(format!("step {t}: applied (x, u) violates Z by {worst_z:e}"));
        }
        let max_diss = (0..n_h)
            .map(|k| {
                dissipation_residual_unchecked(
                    &cfg.storage,
                    &cfg.rho,
                    &cfg.cost,
                    &cfg.steady,
                    &plan.theta_seq[k],
                    &plan.theta_seq[k + 1],
                    &plan.x_seq[k],
                    &plan.u_seq[k],
                    &plan.x_seq[k + 1],
                )
            })
            .fold(f64::NEG_INFINITY, f64::max);
        if cfg.enforce_dissipation && max_diss > DISSIPATION_LOG_TOL {
            flags.push(format!("step {t}: dissipation residual {max_diss:e} on the applied plan"));
        }
        let (rotated, rotated_direct) = rotated_value_parts(cfg, &plan, &x, &theta);
        let theta_next = plan.theta_seq[1].clone();

        steps.push(StepRecord {
            t,
            x: x.clone(),
            u: u.clone(),
            theta: theta.clone(),
            theta_next: theta_next.clone(),
            stage_cost,
            running_avg: total / (t + 1) as f64,
            value: plan.value,
            rotated_value: rotated,
            rotated_value_direct: rotated_direct,
            max_diss_residual: max_diss,
            warmstart_margin: report.max_residual,
            warm_value: warm.value,
            warm_feasible: report.feasible,
            solver_status: sol.nlp.status,
            solver_iters: sol.nlp.iterations,
            fell_back,
            plan: plan.clone(),
            trace: if cfg.solver.trace { format_trace(&sol.nlp.trace) } else { String::new() },
        });

        x = cfg.system.step(&x, &u)?;
        theta = theta_next;
        prev = Some((ocp, plan, sol.nlp.multipliers));
    }

    Ok(ClosedLoopLog {
        config_hash: cfg.config_hash.clone(),
        steady: cfg.steady.clone(),
        horizon: n_h,
        steps,
        final_state: x,
        final_theta: theta,
        flags,
    })
}

/// Smallest `t` with `‖x_s − xs‖₂ ≤ tol` for every `s ≥ t` (over `x_0 … x_T`).
pub fn convergence_time(log: &ClosedLoopLog, tol: f64) -> Option<usize> {
    convergence_time_of(&log.states(), &log.steady.xs, tol)
}

pub fn convergence_time_of(states: &[Vec<f64>], xs: &[f64], tol: f64) -> Option<usize> {
    match states.iter().rposition(|x| dist(x, xs) > tol) {
        None => Some(0),
        Some(last) if last + 1 < states.len() => Some(last + 1),
        Some(_) => None,
    }
}

/// Mean of the first `horizon` stage costs.
pub fn transient_average(log: &ClosedLoopLog, horizon: usize) -> Result<f64> {
    transient_average_of(&log.stage_costs(), horizon)
}

pub fn transient_average_of(costs: &[f64], horizon: usize) -> Result<f64> {
    if horizon == 0 || horizon > costs.len() {
        return Err(EmpcError::InvalidArgument(format!(
            "averaging horizon {horizon} must be in 1..={}",
            costs.len()
        )));
    }
    Ok(costs[..horizon].iter().sum::<f64>() / horizon as f64)
}

/// `trajectory.csv` contents, one row per step.
pub fn trajectory_csv(log: &ClosedLoopLog) -> String {
    let n = log.steady.xs.len();
    let m = log.steady.us.len();
    let p = log.steps.first().map(|s| s.theta.len()).unwrap_or(0);
    let mut out = String::from("t");
    (0..n).for_each(|i| write!(out, ",x{i}").unwrap());
    (0..m).for_each(|j| write!(out, ",u{j}").unwrap());
    out.push_str(",stage_cost,running_avg");
    (0..p).for_each(|i| write!(out, ",theta_{i}").unwrap());
    out.push_str(",value,rotated_value,max_diss_residual,warmstart_margin,solver_status,solver_iters\n");
    for s in &log.steps {
        write!(out, "{}", s.t).unwrap();
        s.x.iter().chain(&s.u).for_each(|v| write!(out, ",{v}").unwrap());
        write!(out, ",{},{}", s.stage_cost, s.running_avg).unwrap();
        s.theta.iter().for_each(|v| write!(out, ",{v}").unwrap());
        writeln!(
            out,
            ",{},{},{},{},{},{}",
            s.value, s.rotated_value, s.max_diss_residual, s.warmstart_margin, s.solver_status, s.solver_iters
        )
        .unwrap();
    }
    out
}

pub fn write_trajectory_csv(log: &ClosedLoopLog, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, trajectory_csv(log))?;
    Ok(())
}
