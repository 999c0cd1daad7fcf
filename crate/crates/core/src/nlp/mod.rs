//! Finite-dimensional nonlinear programs and an augmented-Lagrangian solver.
//!
//! ```text
//! minimize f(z)  s.t.  c(z) = 0,  g(z) ≤ 0,  lo ≤ z ≤ hi
//! ```
//!
//! The outer loop updates multipliers of the PHR augmented Lagrangian
//!
//! ```text
//! L(z) = f + Σ λᵢcᵢ + r/2 Σ cᵢ² + 1/(2r) Σ [max(0, μⱼ + r·gⱼ)² − μⱼ²]
//! ```
//!
//! and grows `r` when feasibility stalls. Each bound-constrained subproblem is
//! solved by projected L-BFGS ([`lbfgs`]). A Gauss-Newton projection onto the
//! active constraints ([`polish`]) then removes the remaining constraint residual,
//! and the result is compared against the starting point so that a feasible start
//! is never returned worse.

mod check;
mod kkt;
mod lbfgs;
mod newton;
mod polish;

pub use check::{grad_check, kkt_report, BlockResidual, GradCheck, KktReport};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, EmpcError, Result};

pub type ObjectiveFn = dyn Fn(&[f64], &mut [f64]) -> f64 + Send + Sync;
pub type ConstraintFn = dyn Fn(&[f64], &mut Vec<(usize, f64)>) -> f64 + Send + Sync;

/// A scalar constraint row. The callable returns the value and pushes its sparse
/// gradient as `(variable, partial)` pairs (repeated indices are summed).
pub struct Constraint {
    pub label: String,
    pub func: Box<ConstraintFn>,
}

/// `min f(z)` subject to labelled equality rows (`= 0`), inequality rows (`≤ 0`)
/// and variable bounds (`±∞` allowed).
pub struct NlpProblem {
    pub num_vars: usize,
    pub var_lo: Vec<f64>,
    pub var_hi: Vec<f64>,
    pub objective_label: String,
    /// Writes `∇f` into a zeroed buffer and returns `f`.
    pub objective: Box<ObjectiveFn>,
    pub eq: Vec<Constraint>,
    pub ineq: Vec<Constraint>,
}

impl NlpProblem {
    pub fn new(num_vars: usize) -> Self {
        NlpProblem {
            num_vars,
            var_lo: vec![f64::NEG_INFINITY; num_vars],
            var_hi: vec![f64::INFINITY; num_vars],
            objective_label: "objective".into(),
            objective: Box::new(|_, _| 0.0),
            eq: Vec::new(),
            ineq: Vec::new(),
        }
    }

    pub fn with_bounds(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), self.num_vars);
        assert_eq!(hi.len(), self.num_vars);
        self.var_lo = lo;
        self.var_hi = hi;
        self
    }

    pub fn set_objective<F>(&mut self, label: impl Into<String>, f: F)
    where
        F: Fn(&[f64], &mut [f64]) -> f64 + Send + Sync + 'static,
    {
        self.objective_label = label.into();
        self.objective = Box::new(f);
    }

    pub fn add_eq<F>(&mut self, label: impl Into<String>, f: F)
    where
        F: Fn(&[f64], &mut Vec<(usize, f64)>) -> f64 + Send + Sync + 'static,
    {
        self.eq.push(Constraint { label: label.into(), func: Box::new(f) });
    }

    pub fn add_ineq<F>(&mut self, label: impl Into<String>, f: F)
    where
        F: Fn(&[f64], &mut Vec<(usize, f64)>) -> f64 + Send + Sync + 'static,
    {
        self.ineq.push(Constraint { label: label.into(), func: Box::new(f) });
    }

    pub fn clip(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.var_lo.iter().zip(&self.var_hi))
            .map(|(&v, (&lo, &hi))| v.max(lo).min(hi))
            .collect()
    }

    pub fn objective_value(&self, z: &[f64]) -> f64 {
        let mut g = vec![0.0; self.num_vars];
        (self.objective)(z, &mut g)
    }

    /// Max equality residual and max inequality violation at `z`.
    pub fn residuals(&self, z: &[f64]) -> (f64, f64) {
        let mut scratch = Vec::new();
        let mut eq: f64 = 0.0;
        for c in &self.eq {
            scratch.clear();
            eq = eq.max((c.func)(z, &mut scratch).abs());
        }
        let mut ineq: f64 = 0.0;
        for c in &self.ineq {
            scratch.clear();
            ineq = ineq.max((c.func)(z, &mut scratch));
        }
        (eq, ineq)
    }

    pub(crate) fn evaluate(&self, z: &[f64]) -> Result<Evaluation> {
        let mut grad = vec![0.0; self.num_vars];
        let f = (self.objective)(z, &mut grad);
        if !f.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(EmpcError::NumericFailure { label: self.objective_label.clone() });
        }
        let eval_rows = |rows: &[Constraint]| -> Result<(Vec<f64>, Vec<Vec<(usize, f64)>>)> {
            let mut vals = Vec::with_capacity(rows.len());
            let mut jac = Vec::with_capacity(rows.len());
            for c in rows {
                let mut g = Vec::new();
                let v = (c.func)(z, &mut g);
                if !v.is_finite() || g.iter().any(|(_, d)| !d.is_finite()) {
                    return Err(EmpcError::NumericFailure { label: c.label.clone() });
                }
                vals.push(v);
                jac.push(g);
            }
            Ok((vals, jac))
        };
        let (c, c_jac) = eval_rows(&self.eq)?;
        let (g, g_jac) = eval_rows(&self.ineq)?;
        Ok(Evaluation { f, grad, c, c_jac, g, g_jac })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Evaluation {
    pub f: f64,
    pub grad: Vec<f64>,
    pub c: Vec<f64>,
    pub c_jac: Vec<Vec<(usize, f64)>>,
    pub g: Vec<f64>,
    pub g_jac: Vec<Vec<(usize, f64)>>,
}

impl Evaluation {
    pub fn eq_residual(&self) -> f64 {
        self.c.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn ineq_violation(&self) -> f64 {
        self.g.iter().fold(0.0, |a, &v| a.max(v))
    }

    pub fn infeasibility(&self) -> f64 {
        self.eq_residual().max(self.ineq_violation())
    }

    /// `∇f + Jcᵀλ + Jgᵀμ`.
    pub fn lagrangian_gradient(&self, lambda: &[f64], mu: &[f64]) -> Vec<f64> {
        let mut g = self.grad.clone();
        for (row, &l) in self.c_jac.iter().zip(lambda) {
            for &(i, d) in row {
                g[i] += l * d;
            }
        }
        for (row, &m) in self.g_jac.iter().zip(mu) {
            for &(i, d) in row {
                g[i] += m * d;
            }
        }
        g
    }
}

/// Infinity norm of the projected gradient step `z − P(z − grad)`.
pub(crate) fn projected_gradient_norm(z: &[f64], grad: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..z.len() {
        let p = (z[i] - grad[i]).max(lo[i]).min(hi[i]);
        worst = worst.max((z[i] - p).abs());
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    FeasibleSuboptimal,
    Infeasible,
    IterationLimit,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::FeasibleSuboptimal => "feasible_suboptimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::IterationLimit => "iteration_limit",
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::FeasibleSuboptimal)
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Solver tolerances and limits. Defaults match the documented contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub feasibility_tol: f64,
    pub stationarity_tol: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub lbfgs_memory: usize,
    /// Projected Newton steps allowed after the quasi-Newton loop stops short of
    /// the inner tolerance; 0 disables the continuation.
    pub newton_iters: usize,
    /// Relative size of the deterministic restart perturbation applied when the
    /// first pass does not move away from the start point; 0 disables the restart.
    pub restart_perturbation: f64,
    pub seed: u64,
    pub polish: bool,
    pub trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            feasibility_tol: 1e-8,
            stationarity_tol: 1e-6,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e12,
            max_outer: 50,
            max_inner: 500,
            lbfgs_memory: 20,
            newton_iters: 50,
            restart_perturbation: 1e-2,
            seed: 0,
            polish: true,
            trace: false,
        }
    }
}

/// Initial multiplier guesses, e.g. carried over from the previous MPC step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Multipliers {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterTrace {
    pub iter: usize,
    pub penalty: f64,
    pub feasibility: f64,
    pub stationarity: f64,
    pub inner_iters: usize,
    pub accepted: bool,
}

impl std::fmt::Display for OuterTrace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "outer {:3} penalty {:9.3e} feas {:9.3e} stat {:9.3e} inner {:4}{}",
            self.iter,
            self.penalty,
            self.feasibility,
            self.stationarity,
            self.inner_iters,
            if self.accepted { "" } else { " rejected" }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpSolution {
    pub z: Vec<f64>,
    pub objective_value: f64,
    pub eq_residual_inf: f64,
    pub ineq_violation_inf: f64,
    pub stationarity_inf: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub multipliers: Multipliers,
    pub trace: Vec<OuterTrace>,
}

impl NlpSolution {
    pub fn infeasibility(&self) -> f64 {
        self.eq_residual_inf.max(self.ineq_violation_inf)
    }
}

/// Feasible outer iterations without halving the best stationarity before the
/// loop gives up.
const STAGNATION_LIMIT: usize = 5;

/// Quasi-Newton iterations without progress before the Newton continuation takes over.
const LBFGS_STALL_WINDOW: usize = 25;

const NEAR_ACTIVE: f64 = 1e-6;

/// Infeasibility below which Newton steps on the KKT system are attempted.
const REFINE_FEASIBILITY: f64 = 1e-4;

/// Solves `p` from `z0` (clipped into the bounds) with zero initial multipliers.
pub fn solve(p: &NlpProblem, z0: &[f64], opts: &SolverOptions) -> Result<NlpSolution> {
    solve_with_multipliers(p, z0, None, opts)
}

/// Solves `p` from `z0`, optionally warm-starting the multipliers.
pub fn solve_with_multipliers(
    p: &NlpProblem,
    z0: &[f64],
    warm: Option<&Multipliers>,
    opts: &SolverOptions,
) -> Result<NlpSolution> {
    check_dim("z0", z0.len(), p.num_vars)?;
    let start = p.clip(z0);
    let start_eval = p.evaluate(&start)?;

    let mut best = solve_once(p, &start, warm, opts)?;

    let stalled = best.z.iter().zip(&start).all(|(a, b)| (a - b).abs() <= 1e-9);
    if stalled && opts.restart_perturbation > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let perturbed: Vec<f64> = start
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let width = (p.var_hi[i] - p.var_lo[i]).min(2.0);
                v + opts.restart_perturbation * width * rng.gen_range(-1.0..1.0)
            })
            .collect();
        let alt = solve_once(p, &p.clip(&perturbed), warm, opts)?;
        if better(&alt, &best, opts.feasibility_tol) {
            let trace = std::mem::take(&mut best.trace);
            best = alt;
            best.iterations += trace.len();
        }
    }

    // Never return worse than a feasible start.
    if start_eval.infeasibility() <= opts.feasibility_tol
        && (best.infeasibility() > opts.feasibility_tol
            || start_eval.f < best.objective_value - 1e-12 * (1.0 + best.objective_value.abs()))
    {
        let stat = projected_gradient_norm(
            &start,
            &start_eval.lagrangian_gradient(&best.multipliers.eq, &best.multipliers.ineq),
            &p.var_lo,
            &p.var_hi,
        );
        best.z = start;
        best.objective_value = start_eval.f;
        best.eq_residual_inf = start_eval.eq_residual();
        best.ineq_violation_inf = start_eval.ineq_violation();
        best.stationarity_inf = stat;
    }
    if opts.polish {
        polish_solution(p, &mut best, opts)?;
    }
    best.status = classify(&best, opts, best.status);
    Ok(best)
}

fn polish_solution(p: &NlpProblem, sol: &mut NlpSolution, opts: &SolverOptions) -> Result<()> {
    if let Some(z) = polish::project(p, &sol.z, &sol.multipliers.ineq, opts.feasibility_tol)? {
        let eval = p.evaluate(&z)?;
        sol.stationarity_inf = projected_gradient_norm(
            &z,
            &eval.lagrangian_gradient(&sol.multipliers.eq, &sol.multipliers.ineq),
            &p.var_lo,
            &p.var_hi,
        );
        sol.objective_value = eval.f;
        sol.eq_residual_inf = eval.eq_residual();
        sol.ineq_violation_inf = eval.ineq_violation();
        sol.z = z;
    }
    Ok(())
}

fn better(a: &NlpSolution, b: &NlpSolution, tol: f64) -> bool {
    let (fa, fb) = (a.infeasibility() <= tol, b.infeasibility() <= tol);
    match (fa, fb) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => a.objective_value < b.objective_value - 1e-12 * (1.0 + b.objective_value.abs()),
        (false, false) => a.infeasibility() < b.infeasibility(),
    }
}

fn classify(sol: &NlpSolution, opts: &SolverOptions, fallback: SolveStatus) -> SolveStatus {
    let feasible = sol.eq_residual_inf <= opts.feasibility_tol && sol.ineq_violation_inf <= opts.feasibility_tol;
    if feasible && sol.stationarity_inf <= opts.stationarity_tol {
        SolveStatus::Optimal
    } else if feasible {
        SolveStatus::FeasibleSuboptimal
    } else if fallback == SolveStatus::Infeasible {
        SolveStatus::Infeasible
    } else {
        SolveStatus::IterationLimit
    }
}

fn solve_once(p: &NlpProblem, start: &[f64], warm: Option<&Multipliers>, opts: &SolverOptions) -> Result<NlpSolution> {
    let n_eq = p.eq.len();
    let n_in = p.ineq.len();
    let mut lambda = vec![0.0; n_eq];
    let mut mu = vec![0.0; n_in];
    if let Some(w) = warm {
        if w.eq.len() == n_eq && w.ineq.len() == n_in {
            lambda.clone_from(&w.eq);
            mu = w.ineq.iter().map(|v| v.max(0.0)).collect();
        }
    }

    let mut z = start.to_vec();
    let mut penalty = opts.initial_penalty;
    let mut eval = p.evaluate(&z)?;
    let mut prev_feas = f64::INFINITY;
    let mut inner_tol: f64 = 1e-3;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut stationarity = f64::INFINITY;
    let mut hit_penalty_cap = false;
    let mut best_stationarity = f64::INFINITY;
    let mut stagnant = 0;

    for outer in 0..opts.max_outer {
        iterations = outer + 1;
        let tol = inner_tol.max(0.1 * opts.stationarity_tol);
        let inner = lbfgs::minimize(
            |x: &[f64], grad: &mut [f64]| augmented_lagrangian(p, x, &lambda, &mu, penalty, grad),
            &z,
            &p.var_lo,
            &p.var_hi,
            &lbfgs::Options {
                tol,
                max_iter: opts.max_inner,
                memory: opts.lbfgs_memory,
                stall_window: if opts.newton_iters > 0 { LBFGS_STALL_WINDOW } else { 0 },
            },
        )?;
        let (mut x_inner, mut inner_iters) = (inner.x, inner.iters);
        if opts.newton_iters > 0 {
            let mut grad = vec![0.0; p.num_vars];
            augmented_lagrangian(p, &x_inner, &lambda, &mu, penalty, &mut grad)?;
            if projected_gradient_norm(&x_inner, &grad, &p.var_lo, &p.var_hi) > tol {
                let nt = newton::minimize(
                    |x: &[f64], grad: &mut [f64]| augmented_lagrangian(p, x, &lambda, &mu, penalty, grad),
                    |x: &[f64]| augmented_lagrangian_hessian(p, x, &lambda, &mu, penalty),
                    &x_inner,
                    &p.var_lo,
                    &p.var_hi,
                    &newton::Options { tol, max_iter: opts.newton_iters },
                )?;
                x_inner = nt.x;
                inner_iters += nt.iters;
            }
        }
        let cand_eval = p.evaluate(&x_inner)?;
        let feas = cand_eval.infeasibility();

        // after the first update, feasibility above tolerance must not increase
        let accept = outer == 0 || feas <= prev_feas || feas <= opts.feasibility_tol;
        if !accept {
            if penalty >= opts.max_penalty {
                hit_penalty_cap = true;
                trace.push(OuterTrace { iter: outer, penalty, feasibility: feas, stationarity, inner_iters, accepted: false });
                break;
            }
            trace.push(OuterTrace { iter: outer, penalty, feasibility: feas, stationarity, inner_iters, accepted: false });
            penalty = (penalty * opts.penalty_growth).min(opts.max_penalty);
            continue;
        }

        z = x_inner;
        eval = cand_eval;
        for (l, c) in lambda.iter_mut().zip(&eval.c) {
            *l += penalty * c;
        }
        for (m, g) in mu.iter_mut().zip(&eval.g) {
            *m = (*m + penalty * g).max(0.0);
        }
        stationarity = projected_gradient_norm(&z, &eval.lagrangian_gradient(&lambda, &mu), &p.var_lo, &p.var_hi);
        trace.push(OuterTrace { iter: outer, penalty, feasibility: feas, stationarity, inner_iters, accepted: true });

        if feas <= opts.feasibility_tol && stationarity <= opts.stationarity_tol {
            break;
        }
        if opts.newton_iters > 0 && feas <= REFINE_FEASIBILITY {
            if let Some(r) = kkt::refine(p, &z, &lambda, &mu, opts)? {
                z = r.z;
                eval = r.eval;
                lambda = r.lambda;
                mu = r.mu;
                stationarity = r.stationarity;
                break;
            }
        }
        if feas <= opts.feasibility_tol && stationarity < 0.5 * best_stationarity {
            best_stationarity = stationarity;
            stagnant = 0;
        } else if feas <= opts.feasibility_tol {
            stagnant += 1;
            if stagnant >= STAGNATION_LIMIT {
                break;
            }
        }
        if feas > opts.feasibility_tol && feas > 0.25 * prev_feas {
            if penalty >= opts.max_penalty {
                hit_penalty_cap = true;
            }
            penalty = (penalty * opts.penalty_growth).min(opts.max_penalty);
        }
        prev_feas = feas;
        inner_tol *= 0.1;
    }

    let mut sol = NlpSolution {
        objective_value: eval.f,
        eq_residual_inf: eval.eq_residual(),
        ineq_violation_inf: eval.ineq_violation(),
        stationarity_inf: stationarity,
        status: SolveStatus::IterationLimit,
        iterations,
        multipliers: Multipliers { eq: lambda, ineq: mu },
        trace: if opts.trace { trace } else { Vec::new() },
        z,
    };
    let fallback = if hit_penalty_cap { SolveStatus::Infeasible } else { SolveStatus::IterationLimit };
    sol.status = classify(&sol, opts, fallback);
    Ok(sol)
}

fn augmented_lagrangian(p: &NlpProblem, z: &[f64], lambda: &[f64], mu: &[f64], r: f64, grad: &mut [f64]) -> Result<f64> {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut val = (p.objective)(z, grad);
    if !val.is_finite() {
        return Err(EmpcError::NumericFailure { label: p.objective_label.clone() });
    }
    let mut row = Vec::with_capacity(16);
    for (c, &l) in p.eq.iter().zip(lambda) {
        row.clear();
        let v = (c.func)(z, &mut row);
        if !v.is_finite() {
            return Err(EmpcError::NumericFailure { label: c.label.clone() });
        }
        val += l * v + 0.5 * r * v * v;
        let w = l + r * v;
        for &(i, d) in &row {
            grad[i] += w * d;
        }
    }
    for (c, &m) in p.ineq.iter().zip(mu) {
        row.clear();
        let v = (c.func)(z, &mut row);
        if !v.is_finite() {
            return Err(EmpcError::NumericFailure { label: c.label.clone() });
        }
        let s = (m + r * v).max(0.0);
        val += (s * s - m * m) / (2.0 * r);
        if s > 0.0 {
            for &(i, d) in &row {
                grad[i] += s * d;
            }
        }
    }
    Ok(val)
}

/// Generalized Hessian of the augmented Lagrangian: the exact penalty term
/// `r·JᵀJ` over the rows that are active in it, plus forward differences of the
/// gradient of `f + Σ wᵢcᵢ` with the weights frozen at `z`.
fn augmented_lagrangian_hessian(p: &NlpProblem, z: &[f64], lambda: &[f64], mu: &[f64], r: f64) -> Result<DMatrix<f64>> {
    let n = p.num_vars;
    let eval = p.evaluate(z)?;
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut weighted: Vec<(&Constraint, f64)> = Vec::new();
    let mut outer = |row: &[(usize, f64)]| {
        for &(i, a) in row {
            for &(j, b) in row {
                h[(i, j)] += r * a * b;
            }
        }
    };
    for ((c, row), (&l, &v)) in p.eq.iter().zip(&eval.c_jac).zip(lambda.iter().zip(&eval.c)) {
        outer(row);
        weighted.push((c, l + r * v));
    }
    for ((c, row), (&m, &v)) in p.ineq.iter().zip(&eval.g_jac).zip(mu.iter().zip(&eval.g)) {
        let s = (m + r * v).max(0.0);
        if s > 0.0 || v > -NEAR_ACTIVE {
            outer(row);
            weighted.push((c, s));
        }
    }

    // rows touching each variable, so a shifted column re-evaluates only those
    let mut touching: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut base_rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(weighted.len());
    for (k, &(c, _)) in weighted.iter().enumerate() {
        let mut row = Vec::new();
        (c.func)(z, &mut row);
        for &(i, _) in &row {
            if touching[i].last() != Some(&k) {
                touching[i].push(k);
            }
        }
        base_rows.push(row);
    }
    let mut base_obj = vec![0.0; n];
    (p.objective)(z, &mut base_obj);
    let mut shifted = z.to_vec();
    let mut obj = vec![0.0; n];
    let mut row = Vec::with_capacity(16);
    for j in 0..n {
        if p.var_lo[j] == p.var_hi[j] {
            continue;
        }
        let step = 1.5e-8 * z[j].abs().max(1.0);
        shifted[j] = z[j] + step;
        obj.iter_mut().for_each(|v| *v = 0.0);
        (p.objective)(&shifted, &mut obj);
        for i in 0..n {
            h[(i, j)] += (obj[i] - base_obj[i]) / step;
        }
        for &k in &touching[j] {
            let (c, w) = weighted[k];
            row.clear();
            (c.func)(&shifted, &mut row);
            for &(i, d) in &row {
                h[(i, j)] += w * d / step;
            }
            for &(i, d) in &base_rows[k] {
                h[(i, j)] -= w * d / step;
            }
        }
        shifted[j] = z[j];
    }
    let sym = (&h + h.transpose()) * 0.5;
    Ok(sym)
}

/// Renders a trace as one text line per outer iteration.
pub fn format_trace(trace: &[OuterTrace]) -> String {
    trace.iter().map(|t| format!("{t}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_1d() -> NlpProblem {
        let mut p = NlpProblem::new(1);
        p.set_objective("f", |z, g| {
            g[0] = 2.0 * (z[0] - 1.0);
            (z[0] - 1.0).powi(2)
        });
        p
    }

    fn sum_constrained() -> NlpProblem {
        let mut p = NlpProblem::new(2);
        p.set_objective("f", |z, g| {
            g[0] = 2.0 * z[0];
            g[1] = 2.0 * z[1];
            z[0] * z[0] + z[1] * z[1]
        });
        p.add_eq("sum", |z, g| {
            g.push((0, 1.0));
            g.push((1, 1.0));
            z[0] + z[1] - 1.0
        });
        p
    }

    fn active_ineq() -> NlpProblem {
        let mut p = NlpProblem::new(1).with_bounds(vec![-10.0], vec![10.0]);
        p.set_objective("f", |z, g| {
            g[0] = -1.0;
            -z[0]
        });
        p.add_ineq("cap", |z, g| {
            g.push((0, 1.0));
            z[0] - 2.0
        });
        p
    }

    #[test]
    fn unconstrained_quadratic() {
        let s = solve(&quad_1d(), &[0.0], &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.z[0] - 1.0).abs() < 1e-7);
        assert!(s.objective_value < 1e-12);
    }

    #[test]
    fn equality_constrained_symmetric() {
        let s = solve(&sum_constrained(), &[0.0, 0.0], &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal, "{s:?}");
        assert!((s.z[0] - 0.5).abs() < 1e-7 && (s.z[1] - 0.5).abs() < 1e-7);
        assert!(s.eq_residual_inf <= 1e-8);
    }

    #[test]
    fn active_inequality() {
        let s = solve(&active_ineq(), &[0.0], &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal, "{s:?}");
        assert!((s.z[0] - 2.0).abs() < 1e-8);
        assert!((s.multipliers.ineq[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn optimal_status_meets_tolerances() {
        for p in [quad_1d(), sum_constrained(), active_ineq()] {
            let z0 = vec![0.3; p.num_vars];
            let s = solve(&p, &z0, &SolverOptions::default()).unwrap();
            if s.status == SolveStatus::Optimal {
                assert!(s.eq_residual_inf <= 1e-8 && s.ineq_violation_inf <= 1e-8 && s.stationarity_inf <= 1e-6);
            }
        }
    }

    #[test]
    fn deterministic() {
        let p = sum_constrained();
        let a = solve(&p, &[0.2, -0.7], &SolverOptions::default()).unwrap();
        let b = solve(&p, &[0.2, -0.7], &SolverOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nan_reports_block_label() {
        let mut p = quad_1d();
        p.add_ineq("broken block", |_, _| f64::NAN);
        match solve(&p, &[0.0], &SolverOptions::default()) {
            Err(EmpcError::NumericFailure { label }) => assert_eq!(label, "broken block"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn feasibility_trace_is_monotone() {
        let mut p = NlpProblem::new(2);
        p.set_objective("f", |z, g| {
            g[0] = 1.0;
            g[1] = 2.0 * z[1];
            z[0] + z[1] * z[1]
        });
        p.add_eq("circle", |z, g| {
            g.push((0, 2.0 * z[0]));
            g.push((1, 2.0 * z[1]));
            z[0] * z[0] + z[1] * z[1] - 1.0
        });
        let opts = SolverOptions { trace: true, polish: false, ..SolverOptions::default() };
        let s = solve(&p, &[0.5, 0.5], &opts).unwrap();
        assert!(!s.trace.is_empty());
        let accepted: Vec<f64> = s.trace.iter().filter(|t| t.accepted).map(|t| t.feasibility).collect();
        for w in accepted.windows(2) {
            assert!(w[1] <= w[0] || w[1] <= opts.feasibility_tol, "{accepted:?}");
        }
        assert!(!format_trace(&s.trace).is_empty());
        assert!(s.eq_residual_inf <= 1e-8);
    }

    #[test]
    fn never_worse_than_feasible_start() {
        // nonconvex: local minima at z = ±1 of (z² − 1)² − 0.1 z, start at the worse one
        let mut p = NlpProblem::new(1).with_bounds(vec![-2.0], vec![2.0]);
        p.set_objective("f", |z, g| {
            let v = z[0];
            g[0] = 4.0 * v * (v * v - 1.0) - 0.1;
            (v * v - 1.0).powi(2) - 0.1 * v
        });
        p.add_ineq("cap", |z, g| {
            g.push((0, 1.0));
            z[0] - 1.5
        });
        let z0 = [-1.0];
        let f0 = p.objective_value(&z0);
        let s = solve(&p, &z0, &SolverOptions::default()).unwrap();
        assert!(s.objective_value <= f0 + 1e-6);
    }
}
