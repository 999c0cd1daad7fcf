//! The per-step economic MPC problem over `(x, u, θ)`, warm starts, candidate
//! validation and terminal-ingredient verification.
//!
//! Decision vector layout for horizon `N` (stable, used for multiplier shifting):
//!
//! ```text
//! [ x_0 … x_N | u_0 … u_{N−1} | θ_0 … θ_N ]
//!   (N+1)·n      N·m             (N+1)·p
//! ```

mod terminal;
mod verify;

pub use terminal::{PenaltyTerm, TerminalIngredients, TerminalMode};
pub(crate) use verify::sample_region;
pub use verify::{verify_assumption4, verify_assumption5, AssumptionReport, Witness};

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, EmpcError, Result};
use crate::model::{constraint_residuals, ConstraintSet, InputConstraints, LocalVar, StageCost, SteadyState, SystemModel};
use crate::nlp::{self, Multipliers, NlpProblem, NlpSolution, SolverOptions};
use crate::storage::{dissipation_residual_unchecked, RhoFunction, StorageFamily};

/// Default tolerance for [`validate_candidate`].
pub const CANDIDATE_TOL: f64 = 1e-8;

/// Everything needed to set up and run one closed-loop experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub system: SystemModel,
    pub constraints: ConstraintSet,
    pub cost: StageCost,
    pub storage: StorageFamily,
    pub rho: RhoFunction,
    pub terminal: TerminalIngredients,
    pub horizon: usize,
    pub steps: usize,
    pub x0: Vec<f64>,
    pub theta0: Vec<f64>,
    pub solver: SolverOptions,
    /// Carry multipliers from one step to the next.
    pub warm_multipliers: bool,
    /// Emit the dissipation rows. Turning this off is only useful for test fixtures.
    pub enforce_dissipation: bool,
    pub steady: SteadyState,
    pub config_hash: String,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.system.n(), self.system.m());
        if self.horizon < 1 {
            return Err(EmpcError::Config("horizon must be ≥ 1".into()));
        }
        if self.steps < 1 {
            return Err(EmpcError::Config("simulation length must be ≥ 1".into()));
        }
        if self.constraints.n() != n || self.constraints.m() != m {
            return Err(EmpcError::Config(format!("constraint set must be over ({n}, {m})")));
        }
        self.cost.check_dims(n, m)?;
        if let Some(b) = self.storage.basis().first() {
            if b.arity() != n {
                return Err(EmpcError::Config(format!("storage monomials must have arity {n}")));
            }
        }
        check_dim("x0", self.x0.len(), n).map_err(|e| EmpcError::Config(e.to_string()))?;
        for i in 0..n {
            if !(self.x0[i] >= self.constraints.state_lo[i] && self.x0[i] <= self.constraints.state_hi[i]) {
                return Err(EmpcError::Config(format!("x0[{i}] = {} outside the state box", self.x0[i])));
            }
        }
        self.storage.check_theta(&self.theta0).map_err(|e| EmpcError::Config(format!("theta0: {e}")))?;
        if self.steady.xs.len() != n || self.steady.us.len() != m {
            return Err(EmpcError::Config("steady state has wrong dimensions".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> OcpLayout {
        OcpLayout { n: self.system.n(), m: self.system.m(), p: self.storage.num_params(), horizon: self.horizon }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OcpLayout {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub horizon: usize,
}

impl OcpLayout {
    pub fn num_vars(&self) -> usize {
        (self.horizon + 1) * self.n + self.horizon * self.m + (self.horizon + 1) * self.p
    }

    pub fn x(&self, k: usize) -> usize {
        k * self.n
    }

    pub fn u(&self, k: usize) -> usize {
        (self.horizon + 1) * self.n + k * self.m
    }

    pub fn theta(&self, k: usize) -> usize {
        (self.horizon + 1) * self.n + self.horizon * self.m + k * self.p
    }

    pub fn pack(&self, t: &OcpSolutionTriple) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.num_vars());
        t.x_seq.iter().for_each(|v| z.extend_from_slice(v));
        t.u_seq.iter().for_each(|v| z.extend_from_slice(v));
        t.theta_seq.iter().for_each(|v| z.extend_from_slice(v));
        z
    }

    pub fn unpack(&self, z: &[f64], value: f64) -> OcpSolutionTriple {
        let n = self.horizon;
        OcpSolutionTriple {
            x_seq: (0..=n).map(|k| z[self.x(k)..self.x(k) + self.n].to_vec()).collect(),
            u_seq: (0..n).map(|k| z[self.u(k)..self.u(k) + self.m].to_vec()).collect(),
            theta_seq: (0..=n).map(|k| z[self.theta(k)..self.theta(k) + self.p].to_vec()).collect(),
            value,
        }
    }
}

/// State, input and parameter sequences of one OCP and its objective value `J_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolutionTriple {
    pub x_seq: Vec<Vec<f64>>,
    pub u_seq: Vec<Vec<f64>>,
    pub theta_seq: Vec<Vec<f64>>,
    pub value: f64,
}

/// `Σ ℓ(x_k, u_k) + V_f(x_N)`.
pub fn trajectory_value(cfg: &ExperimentConfig, x_seq: &[Vec<f64>], u_seq: &[Vec<f64>]) -> f64 {
    let stage: f64 = x_seq.iter().zip(u_seq).map(|(x, u)| cfg.cost.eval(x, u)).sum();
    stage + cfg.terminal.vf(&x_seq[u_seq.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RowBlock {
    InitialState,
    InitialTheta,
    Dynamics,
    PinnedTheta,
    Terminal,
    StateInput,
    Dissipation,
}

/// Identifies one constraint row independently of the horizon position, so that
/// multipliers can be moved one stage forward between consecutive problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RowKey {
    pub block: RowBlock,
    pub stage: Option<usize>,
    pub sub: usize,
}

pub struct Ocp {
    pub nlp: NlpProblem,
    pub layout: OcpLayout,
    pub eq_keys: Vec<RowKey>,
    pub ineq_keys: Vec<RowKey>,
}

struct OcpData {
    sys: SystemModel,
    z: ConstraintSet,
    cost: StageCost,
    fam: StorageFamily,
    rho: RhoFunction,
    steady: SteadyState,
    term: TerminalIngredients,
    lay: OcpLayout,
}

/// Builds the per-step problem at `(x_t, θ_t)`.
pub fn build_ocp(cfg: &ExperimentConfig, x_t: &[f64], theta_t: &[f64]) -> Result<Ocp> {
    build(cfg, x_t, theta_t, true)
}

fn build(cfg: &ExperimentConfig, x_t: &[f64], theta_t: &[f64], with_objective: bool) -> Result<Ocp> {
    cfg.validate()?;
    let lay = cfg.layout();
    check_dim("x_t", x_t.len(), lay.n)?;
    cfg.storage.check_theta(theta_t)?;
    let (n, m, p, hor) = (lay.n, lay.m, lay.p, lay.horizon);
    let d = Arc::new(OcpData {
        sys: cfg.system.clone(),
        z: cfg.constraints.clone(),
        cost: cfg.cost.clone(),
        fam: cfg.storage.clone(),
        rho: cfg.rho,
        steady: cfg.steady.clone(),
        term: cfg.terminal.clone(),
        lay,
    });

    let nv = lay.num_vars();
    let mut lo = vec![f64::NEG_INFINITY; nv];
    let mut hi = vec![f64::INFINITY; nv];
    for k in 0..=hor {
        for i in 0..n {
            lo[lay.x(k) + i] = cfg.constraints.state_lo[i];
            hi[lay.x(k) + i] = cfg.constraints.state_hi[i];
        }
        for i in 0..p {
            lo[lay.theta(k) + i] = cfg.storage.theta_lo()[i];
            hi[lay.theta(k) + i] = cfg.storage.theta_hi()[i];
        }
        if k >= 1 {
            for &(i, v) in cfg.storage.pinned() {
                lo[lay.theta(k) + i] = v;
                hi[lay.theta(k) + i] = v;
            }
        }
    }
    // the initial conditions are fixed exactly; their equality rows stay in place
    for i in 0..n {
        lo[lay.x(0) + i] = x_t[i];
        hi[lay.x(0) + i] = x_t[i];
    }
    for i in 0..p {
        lo[lay.theta(0) + i] = theta_t[i];
        hi[lay.theta(0) + i] = theta_t[i];
    }
    for i in 0..n {
        let j = lay.x(hor) + i;
        lo[j] = lo[j].max(cfg.terminal.lo()[i]);
        hi[j] = hi[j].min(cfg.terminal.hi()[i]);
    }
    if let InputConstraints::Box { lo: ulo, hi: uhi } = &cfg.constraints.input {
        for k in 0..hor {
            for j in 0..m {
                lo[lay.u(k) + j] = ulo[j];
                hi[lay.u(k) + j] = uhi[j];
            }
        }
    }
    let mut nlp = NlpProblem::new(nv).with_bounds(lo, hi);
    let mut eq_keys = Vec::new();
    let mut ineq_keys = Vec::new();

    if with_objective {
        let dd = d.clone();
        nlp.set_objective("objective", move |z, g| {
            let l = &dd.lay;
            let (gx, gr) = g.split_at_mut(l.u(0));
            let mut val = 0.0;
            for k in 0..l.horizon {
                let x = &z[l.x(k)..l.x(k) + l.n];
                let u = &z[l.u(k)..l.u(k) + l.m];
                val += dd.cost.eval(x, u);
                dd.cost.add_gradient(x, u, 1.0, &mut gx[l.x(k)..l.x(k) + l.n], &mut gr[k * l.m..(k + 1) * l.m]);
            }
            let xn = &z[l.x(l.horizon)..l.x(l.horizon) + l.n];
            val += dd.term.vf(xn);
            dd.term.add_vf_grad(xn, 1.0, &mut gx[l.x(l.horizon)..l.x(l.horizon) + l.n]);
            val
        });
    } else {
        nlp.set_objective("feasibility", |_, _| 0.0);
    }

    for i in 0..n {
        let (idx, target) = (lay.x(0) + i, x_t[i]);
        nlp.add_eq("initial state", move |z, g| {
            g.push((idx, 1.0));
            z[idx] - target
        });
        eq_keys.push(RowKey { block: RowBlock::InitialState, stage: None, sub: i });
    }
    for i in 0..p {
        let (idx, target) = (lay.theta(0) + i, theta_t[i]);
        nlp.add_eq("initial theta", move |z, g| {
            g.push((idx, 1.0));
            z[idx] - target
        });
        eq_keys.push(RowKey { block: RowBlock::InitialTheta, stage: None, sub: i });
    }
    for k in 0..hor {
        for i in 0..n {
            let dd = d.clone();
            nlp.add_eq(format!("dynamics k={k}"), move |z, g| {
                let l = &dd.lay;
                let (xo, uo, xn) = (l.x(k), l.u(k), l.x(k + 1));
                g.push((xn + i, 1.0));
                for j in 0..l.n {
                    let a = dd.sys.a(i, j);
                    if a != 0.0 {
                        g.push((xo + j, -a));
                    }
                }
                for j in 0..l.m {
                    let b = dd.sys.b(i, j);
                    if b != 0.0 {
                        g.push((uo + j, -b));
                    }
                }
                z[xn + i] - dd.sys.step_row(i, &z[xo..xo + l.n], &z[uo..uo + l.m])
            });
            eq_keys.push(RowKey { block: RowBlock::Dynamics, stage: Some(k), sub: i });
        }
    }
    for k in 1..=hor {
        for (s, &(i, v)) in cfg.storage.pinned().iter().enumerate() {
            let idx = lay.theta(k) + i;
            nlp.add_eq(format!("pinned theta k={k}"), move |z, g| {
                g.push((idx, 1.0));
                z[idx] - v
            });
            eq_keys.push(RowKey { block: RowBlock::PinnedTheta, stage: Some(k), sub: s });
        }
    }
    for r in 0..cfg.terminal.e_vector().len() {
        let dd = d.clone();
        nlp.add_eq("terminal", move |z, g| {
            let l = &dd.lay;
            let xo = l.x(l.horizon);
            let row = &dd.term.e_matrix()[r];
            let mut v = -dd.term.e_vector()[r];
            for (j, &e) in row.iter().enumerate() {
                if e != 0.0 {
                    g.push((xo + j, e));
                    v += e * z[xo + j];
                }
            }
            v
        });
        eq_keys.push(RowKey { block: RowBlock::Terminal, stage: None, sub: r });
    }

    for k in 0..hor {
        for r in 0..cfg.constraints.num_rows() {
            let dd = d.clone();
            nlp.add_ineq(format!("state-input k={k}"), move |z, g| {
                let l = &dd.lay;
                let (xo, uo) = (l.x(k), l.u(k));
                let mut local = Vec::with_capacity(4);
                let v = dd.z.row(r, &z[xo..xo + l.n], &z[uo..uo + l.m], &mut local);
                for (var, dv) in local {
                    match var {
                        LocalVar::X(i) => g.push((xo + i, dv)),
                        LocalVar::U(j) => g.push((uo + j, dv)),
                    }
                }
                v
            });
            ineq_keys.push(RowKey { block: RowBlock::StateInput, stage: Some(k), sub: r });
        }
    }
    if cfg.enforce_dissipation {
        for k in 0..hor {
            let dd = d.clone();
            nlp.add_ineq(format!("dissipation k={k}"), move |z, g| dissipation_row(&dd, k, z, g));
            ineq_keys.push(RowKey { block: RowBlock::Dissipation, stage: Some(k), sub: 0 });
        }
    }

    Ok(Ocp { nlp, layout: lay, eq_keys, ineq_keys })
}

fn dissipation_row(d: &OcpData, k: usize, z: &[f64], g: &mut Vec<(usize, f64)>) -> f64 {
    let l = &d.lay;
    let (xo, uo, xno, to, tno) = (l.x(k), l.u(k), l.x(k + 1), l.theta(k), l.theta(k + 1));
    let x = &z[xo..xo + l.n];
    let u = &z[uo..uo + l.m];
    let xn = &z[xno..xno + l.n];
    let th = &z[to..to + l.p];
    let thn = &z[tno..tno + l.p];

    let phi = d.fam.features_unchecked(x);
    let phin = d.fam.features_unchecked(xn);
    for i in 0..l.p {
        g.push((tno + i, phin[i]));
        g.push((to + i, -phi[i]));
    }
    let mut gxn = vec![0.0; l.n];
    d.fam.add_grad_x(thn, xn, 1.0, &mut gxn);
    let mut gx = vec![0.0; l.n];
    let mut gu = vec![0.0; l.m];
    d.fam.add_grad_x(th, x, -1.0, &mut gx);
    d.cost.add_gradient(x, u, -1.0, &mut gx, &mut gu);
    let w = d.rho.weight();
    for i in 0..l.n {
        gx[i] += 2.0 * w * (x[i] - d.steady.xs[i]);
    }
    g.extend(gxn.iter().enumerate().map(|(i, &v)| (xno + i, v)));
    g.extend(gx.iter().enumerate().map(|(i, &v)| (xo + i, v)));
    g.extend(gu.iter().enumerate().map(|(j, &v)| (uo + j, v)));

    let lam_n: f64 = phin.iter().zip(thn).map(|(a, b)| a * b).sum();
    let lam: f64 = phi.iter().zip(th).map(|(a, b)| a * b).sum();
    lam_n - lam - d.cost.eval(x, u) + d.steady.ls + d.rho.eval_offset(x, &d.steady.xs)
}

/// Moves multipliers of the previous problem one stage forward; the last stage
/// of each staged block repeats the previous last stage.
pub fn shift_multipliers(prev: &Ocp, mult: &Multipliers, next: &Ocp) -> Multipliers {
    let shift = |keys: &[RowKey], vals: &[f64], new_keys: &[RowKey]| -> Vec<f64> {
        let map: HashMap<RowKey, f64> = keys.iter().copied().zip(vals.iter().copied()).collect();
        new_keys
            .iter()
            .map(|k| match k.stage {
                None => map.get(k).copied().unwrap_or(0.0),
                Some(s) => map
                    .get(&RowKey { stage: Some(s + 1), ..*k })
                    .or_else(|| map.get(k))
                    .copied()
                    .unwrap_or(0.0),
            })
            .collect()
    };
    Multipliers {
        eq: shift(&prev.eq_keys, &mult.eq, &next.eq_keys),
        ineq: shift(&prev.ineq_keys, &mult.ineq, &next.ineq_keys),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolve {
    pub triple: OcpSolutionTriple,
    pub nlp: NlpSolution,
}

/// Solves `ocp` from the warm-start triple.
pub fn solve_ocp(
    cfg: &ExperimentConfig,
    ocp: &Ocp,
    warm: &OcpSolutionTriple,
    mult: Option<&Multipliers>,
) -> Result<OcpSolve> {
    let z0 = ocp.layout.pack(warm);
    let sol = nlp::solve_with_multipliers(&ocp.nlp, &z0, mult, &cfg.solver)?;
    let triple = ocp.layout.unpack(&sol.z, sol.objective_value);
    Ok(OcpSolve { triple, nlp: sol })
}

/// Zero-input rollout from `x_t` clipped to the state box, with `θ` held at
/// `θ_t`. If that candidate is infeasible, a feasibility-phase problem (zero
/// objective) is solved from it and its result returned instead; the flag
/// reports which path was taken.
pub fn cold_start(cfg: &ExperimentConfig, x_t: &[f64], theta_t: &[f64]) -> Result<(OcpSolutionTriple, bool)> {
    let (n, m, hor) = (cfg.system.n(), cfg.system.m(), cfg.horizon);
    let clip = |x: Vec<f64>| -> Vec<f64> {
        (0..n).map(|i| x[i].clamp(cfg.constraints.state_lo[i], cfg.constraints.state_hi[i])).collect()
    };
    let mut x_seq = vec![clip(x_t.to_vec())];
    let u_seq = vec![vec![0.0; m]; hor];
    for k in 0..hor {
        let next = clip(cfg.system.step(&x_seq[k], &u_seq[k])?);
        x_seq.push(next);
    }
    let value = trajectory_value(cfg, &x_seq, &u_seq);
    let rollout = OcpSolutionTriple { x_seq, u_seq, theta_seq: vec![theta_t.to_vec(); hor + 1], value };
    if validate_candidate(&rollout, cfg, x_t, theta_t, CANDIDATE_TOL).feasible {
        return Ok((rollout, false));
    }
    let phase = build(cfg, x_t, theta_t, false)?;
    let sol = nlp::solve(&phase.nlp, &phase.layout.pack(&rollout), &cfg.solver)?;
    let mut t = phase.layout.unpack(&sol.z, 0.0);
    t.value = trajectory_value(cfg, &t.x_seq, &t.u_seq);
    Ok((t, true))
}

/// Drops the first stage and appends `u = κ_f(x_N)`, `x = f(x_N, u)`, `θ = θ_N`.
pub fn shift_warm_start(prev: &OcpSolutionTriple, cfg: &ExperimentConfig) -> OcpSolutionTriple {
    let last_x = prev.x_seq.last().expect("non-empty state sequence").clone();
    let last_theta = prev.theta_seq.last().expect("non-empty theta sequence").clone();
    let u_app = cfg.terminal.kappa(&last_x);
    let x_app = cfg.system.step_unchecked(&last_x, &u_app);

    let mut x_seq: Vec<Vec<f64>> = prev.x_seq[1..].to_vec();
    x_seq.push(x_app);
    let mut u_seq: Vec<Vec<f64>> = prev.u_seq[1..].to_vec();
    u_seq.push(u_app);
    let mut theta_seq: Vec<Vec<f64>> = prev.theta_seq[1..].to_vec();
    theta_seq.push(last_theta);
    let value = trajectory_value(cfg, &x_seq, &u_seq);
    OcpSolutionTriple { x_seq, u_seq, theta_seq, value }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMax {
    pub block: String,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub blocks: Vec<BlockMax>,
    pub max_residual: f64,
    pub feasible: bool,
}

impl FeasibilityReport {
    pub fn block(&self, name: &str) -> Option<f64> {
        self.blocks.iter().find(|b| b.block == name).map(|b| b.max_residual)
    }
}

/// Evaluates every constraint block of the OCP on `cand` directly from the
/// model, constraint and storage functions.
pub fn validate_candidate(
    cand: &OcpSolutionTriple,
    cfg: &ExperimentConfig,
    x_t: &[f64],
    theta_t: &[f64],
    tol: f64,
) -> FeasibilityReport {
    let (n, m, p, hor) = (cfg.system.n(), cfg.system.m(), cfg.storage.num_params(), cfg.horizon);
    let shape_ok = cand.x_seq.len() == hor + 1
        && cand.u_seq.len() == hor
        && cand.theta_seq.len() == hor + 1
        && cand.x_seq.iter().all(|v| v.len() == n)
        && cand.u_seq.iter().all(|v| v.len() == m)
        && cand.theta_seq.iter().all(|v| v.len() == p)
        && x_t.len() == n
        && theta_t.len() == p;
    if !shape_ok {
        let blocks = vec![BlockMax { block: "shape".into(), max_residual: f64::INFINITY }];
        return FeasibilityReport { blocks, max_residual: f64::INFINITY, feasible: false };
    }
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let pos = |v: f64| v.max(0.0);

    let init_x = diff(&cand.x_seq[0], x_t);
    let init_th = diff(&cand.theta_seq[0], theta_t);
    let mut dyn_r: f64 = 0.0;
    let mut z_r: f64 = 0.0;
    let mut diss: f64 = 0.0;
    for k in 0..hor {
        let (x, u) = (&cand.x_seq[k], &cand.u_seq[k]);
        let next = cfg.system.step_unchecked(x, u);
        dyn_r = dyn_r.max(diff(&next, &cand.x_seq[k + 1]));
        if let Ok(r) = constraint_residuals(&cfg.constraints, x, u) {
            z_r = r.into_iter().fold(z_r, |a, v| a.max(pos(v)));
        }
        if cfg.enforce_dissipation {
            let r = dissipation_residual_unchecked(
                &cfg.storage,
                &cfg.rho,
                &cfg.cost,
                &cfg.steady,
                &cand.theta_seq[k],
                &cand.theta_seq[k + 1],
                x,
                &cand.u_seq[k],
                &cand.x_seq[k + 1],
            );
            diss = diss.max(pos(r));
        }
    }
    let xn = &cand.x_seq[hor];
    for i in 0..n {
        z_r = z_r.max(pos(cfg.constraints.state_lo[i] - xn[i])).max(pos(xn[i] - cfg.constraints.state_hi[i]));
    }
    let mut th_box: f64 = 0.0;
    let mut pins: f64 = 0.0;
    for th in &cand.theta_seq {
        for i in 0..p {
            th_box = th_box.max(pos(cfg.storage.theta_lo()[i] - th[i])).max(pos(th[i] - cfg.storage.theta_hi()[i]));
        }
        for &(i, v) in cfg.storage.pinned() {
            pins = pins.max((th[i] - v).abs());
        }
    }
    let term = cfg.terminal.membership_residual(xn);

    let blocks: Vec<BlockMax> = [
        ("initial state", init_x),
        ("initial theta", init_th),
        ("dynamics", dyn_r),
        ("state-input", z_r),
        ("theta box", th_box),
        ("pinned theta", pins),
        ("dissipation", diss),
        ("terminal", term),
    ]
    .into_iter()
    .map(|(b, v)| BlockMax { block: b.to_string(), max_residual: v })
    .collect();
    let max_residual = blocks.iter().map(|b| b.max_residual).fold(0.0, f64::max);
    let feasible = max_residual.is_finite() && max_residual <= tol;
    FeasibilityReport { blocks, max_residual, feasible }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{rotator_constraints, SteadyState};
    use crate::monomial::Monomial;

    fn steady() -> SteadyState {
        SteadyState { xs: vec![0.0, 0.0], us: vec![0.0], ls: 0.0 }
    }

    pub(crate) fn equality_cfg(horizon: usize) -> ExperimentConfig {
        let z = rotator_constraints();
        let terminal = TerminalIngredients::equality(&steady(), &z.state_lo, &z.state_hi);
        let storage = StorageFamily::symmetric(StorageFamily::quadratic_basis(), 5.0, vec![]).unwrap();
        ExperimentConfig {
            system: SystemModel::rotator(),
            constraints: z,
            cost: StageCost::Quartic,
            theta0: storage.default_theta(),
            storage,
            rho: RhoFunction::new(0.2).unwrap(),
            terminal,
            horizon,
            steps: 10,
            x0: vec![1.0, 1.0],
            solver: SolverOptions::default(),
            warm_multipliers: true,
            enforce_dissipation: true,
            steady: steady(),
            config_hash: String::new(),
        }
    }

    pub(crate) fn region_cfg(pin_a5: bool) -> ExperimentConfig {
        let z = rotator_constraints();
        let terminal = TerminalIngredients::region(
            vec![vec![1.0, 0.0]],
            vec![0.0],
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
            vec![PenaltyTerm { monomial: Monomial::new(vec![0, 2]), coeff: 1.0 }],
            vec![vec![0.0, -1.0]],
            vec![0.0],
            &steady(),
            &z.state_lo,
            &z.state_hi,
        )
        .unwrap();
        let pins = if pin_a5 { vec![(4, 0.0)] } else { vec![] };
        let storage = StorageFamily::symmetric(StorageFamily::quartic_basis(), 5.0, pins).unwrap();
        ExperimentConfig {
            theta0: storage.default_theta(),
            storage,
            terminal,
            cost: StageCost::Quartic,
            ..equality_cfg(20)
        }
    }

    fn steady_triple(cfg: &ExperimentConfig) -> OcpSolutionTriple {
        let h = cfg.horizon;
        OcpSolutionTriple {
            x_seq: vec![vec![0.0, 0.0]; h + 1],
            u_seq: vec![vec![0.0]; h],
            theta_seq: vec![vec![0.0; cfg.storage.num_params()]; h + 1],
            value: 0.0,
        }
    }

    #[test]
    fn layout_arithmetic() {
        let cfg = equality_cfg(20);
        let ocp = build_ocp(&cfg, &[1.0, 1.0], &cfg.theta0).unwrap();
        assert_eq!(ocp.layout.num_vars(), 188);
        assert_eq!(ocp.nlp.num_vars, 188);
        let t = steady_triple(&cfg);
        assert_eq!(ocp.layout.unpack(&ocp.layout.pack(&t), 0.0), t);
    }

    #[test]
    fn horizon_one_rows() {
        let cfg = equality_cfg(1);
        let ocp = build_ocp(&cfg, &[0.5, 0.0], &cfg.theta0).unwrap();
        let count = |pre: &str, rows: &[nlp::Constraint]| rows.iter().filter(|c| c.label.starts_with(pre)).count();
        assert_eq!(count("initial", &ocp.nlp.eq), 2 + 6);
        assert_eq!(count("dynamics", &ocp.nlp.eq), 2);
        assert_eq!(count("terminal", &ocp.nlp.eq), 2);
        assert_eq!(ocp.nlp.eq.len(), 2 + 6 + 2 + 2);
        assert_eq!(count("dissipation", &ocp.nlp.ineq), 1);
        assert_eq!(count("state-input k=0", &ocp.nlp.ineq), 6);
        assert_eq!(ocp.nlp.ineq.len(), 7);
    }

    #[test]
    fn steady_candidate_feasible_and_optimal() {
        let cfg = equality_cfg(20);
        let ocp = build_ocp(&cfg, &[0.0, 0.0], &cfg.theta0).unwrap();
        let t = steady_triple(&cfg);
        let z = ocp.layout.pack(&t);
        let (e, i) = ocp.nlp.residuals(&z);
        assert_eq!(e, 0.0);
        assert!(i <= 0.0);
        assert!(validate_candidate(&t, &cfg, &[0.0, 0.0], &cfg.theta0, CANDIDATE_TOL).feasible);
        let sol = solve_ocp(&cfg, &ocp, &t, None).unwrap();
        assert!(sol.triple.value <= 20.0 * cfg.steady.ls + 1e-6);
    }

    #[test]
    fn theta_outside_box_reported() {
        let cfg = equality_cfg(3);
        let mut t = steady_triple(&cfg);
        t.theta_seq[2][0] = 6.0;
        let r = validate_candidate(&t, &cfg, &[0.0, 0.0], &cfg.theta0, CANDIDATE_TOL);
        assert!(!r.feasible);
        assert_eq!(r.block("theta box"), Some(1.0));
    }

    #[test]
    fn shift_examples() {
        let cfg = equality_cfg(4);
        let t = steady_triple(&cfg);
        let s = shift_warm_start(&t, &cfg);
        assert_eq!(s.x_seq[4], vec![0.0, 0.0]);
        assert_eq!(s.theta_seq[4], vec![0.0; 6]);

        let cfg = region_cfg(true);
        let mut t = steady_triple(&cfg);
        for (k, x) in t.x_seq.iter_mut().enumerate() {
            *x = vec![0.1 * k as f64, -0.2];
        }
        t.x_seq[20] = vec![0.0, 0.7];
        let s = shift_warm_start(&t, &cfg);
        assert_eq!(s.u_seq[19], vec![-0.7]);
        assert_eq!(s.x_seq[20], vec![0.0, 0.0]);
        assert_eq!(&s.x_seq[..20], &t.x_seq[1..]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for cfg in [equality_cfg(5), region_cfg(true)] {
            let ocp = build_ocp(&cfg, &[0.3, -0.4], &cfg.theta0).unwrap();
            for _ in 0..5 {
                let z: Vec<f64> = (0..ocp.nlp.num_vars)
                    .map(|i| {
                        let (lo, hi) = (ocp.nlp.var_lo[i].max(-2.0), ocp.nlp.var_hi[i].min(2.0));
                        lo + (hi - lo) * rng.gen_range(0.05..0.95)
                    })
                    .collect();
                let r = nlp::grad_check(&ocp.nlp, &z, 1e-6);
                assert!(r.max_rel_error <= 1e-5, "{r:?}");
            }
        }
    }

    #[test]
    fn multiplier_shift_moves_stages() {
        let cfg = equality_cfg(3);
        let a = build_ocp(&cfg, &[0.0, 0.0], &cfg.theta0).unwrap();
        let b = build_ocp(&cfg, &[0.1, 0.0], &cfg.theta0).unwrap();
        let ineq: Vec<f64> = a.ineq_keys.iter().map(|k| k.stage.unwrap_or(9) as f64 + 0.1 * k.sub as f64).collect();
        let eq = vec![1.0; a.eq_keys.len()];
        let s = shift_multipliers(&a, &Multipliers { eq, ineq }, &b);
        for (k, v) in b.ineq_keys.iter().zip(&s.ineq) {
            let expect = (k.stage.unwrap() + 1).min(2) as f64 + 0.1 * k.sub as f64;
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn horizon_zero_rejected() {
        let mut cfg = equality_cfg(1);
        cfg.horizon = 0;
        match build_ocp(&cfg, &[0.0, 0.0], &cfg.theta0.clone()) {
            Err(EmpcError::Config(msg)) => assert_eq!(msg, "horizon must be ≥ 1"),
            Err(other) => panic!("unexpected {other:?}"),
            Ok(_) => panic!("accepted N = 0"),
        }
    }
}
