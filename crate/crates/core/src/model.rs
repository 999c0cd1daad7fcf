//! Plant dynamics, pointwise state/input constraints, economic stage costs and
//! the optimal steady-state problem.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, EmpcError, Result};
use crate::monomial::Monomial;
use crate::nlp::{self, NlpProblem, SolveStatus, SolverOptions};

/// Feasibility tolerance used for steady-state and orbit checks.
pub const STEADY_TOL: f64 = 1e-8;
const ORBIT_CLOSURE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Linear,
    /// `A = [[0,1],[-1,0]]`, `B = [[1],[0]]`.
    Rotator,
}

/// Discrete-time plant `x⁺ = A·x + B·u`. Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    n: usize,
    m: usize,
    kind: ModelKind,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl SystemModel {
    pub fn linear(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Result<Self> {
        let n = a.len();
        if n == 0 {
            return Err(EmpcError::InvalidArgument("state dimension must be ≥ 1".into()));
        }
        if a.iter().any(|row| row.len() != n) {
            return Err(EmpcError::InvalidArgument("A must be square".into()));
        }
        if b.len() != n {
            return Err(EmpcError::InvalidArgument(format!("B must have {n} rows")));
        }
        let m = b[0].len();
        if m == 0 || b.iter().any(|row| row.len() != m) {
            return Err(EmpcError::InvalidArgument("B rows must share a nonzero width".into()));
        }
        Ok(SystemModel {
            n,
            m,
            kind: ModelKind::Linear,
            a: a.into_iter().flatten().collect(),
            b: b.into_iter().flatten().collect(),
        })
    }

    pub fn rotator() -> Self {
        SystemModel {
            n: 2,
            m: 1,
            kind: ModelKind::Rotator,
            a: vec![0.0, 1.0, -1.0, 0.0],
            b: vec![1.0, 0.0],
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "rotator" => Ok(Self::rotator()),
            other => Err(EmpcError::Config(format!("unknown named system `{other}`"))),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn b(&self, i: usize, j: usize) -> f64 {
        self.b[i * self.m + j]
    }

    /// `f(x, u)`.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_dim("state", x.len(), self.n)?;
        check_dim("input", u.len(), self.m)?;
        Ok(self.step_unchecked(x, u))
    }

    pub(crate) fn step_unchecked(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.step_row(i, x, u)).collect()
    }

    pub(crate) fn step_row(&self, i: usize, x: &[f64], u: &[f64]) -> f64 {
        let ax: f64 = (0..self.n).map(|j| self.a(i, j) * x[j]).sum();
        let bu: f64 = (0..self.m).map(|j| self.b(i, j) * u[j]).sum();
        ax + bu
    }
}

/// One state-dependent input row: `c_lo + d_loᵀx ≤ u_j ≤ c_hi + d_hiᵀx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoupledRow {
    pub c_lo: f64,
    pub d_lo: Vec<f64>,
    pub c_hi: f64,
    pub d_hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputConstraints {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    CoupledAffine(Vec<CoupledRow>),
}

/// Variable a constraint row or cost depends on, in local `(x, u)` indexing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalVar {
    X(usize),
    U(usize),
}

/// Compact set `Z ⊆ X × U`: a state box and either an input box or
/// state-dependent affine input bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    pub input: InputConstraints,
}

impl ConstraintSet {
    pub fn new(state_lo: Vec<f64>, state_hi: Vec<f64>, input: InputConstraints) -> Result<Self> {
        let n = state_lo.len();
        check_dim("state_hi", state_hi.len(), n)?;
        for i in 0..n {
            if !(state_lo[i].is_finite() && state_hi[i].is_finite()) {
                return Err(EmpcError::InvalidArgument("state bounds must be finite".into()));
            }
            if state_lo[i] > state_hi[i] {
                return Err(EmpcError::InvalidArgument(format!("state_lo[{i}] > state_hi[{i}]")));
            }
        }
        let set = ConstraintSet { state_lo, state_hi, input };
        match &set.input {
            InputConstraints::Box { lo, hi } => {
                check_dim("input_hi", hi.len(), lo.len())?;
                for j in 0..lo.len() {
                    if !(lo[j].is_finite() && hi[j].is_finite()) || lo[j] > hi[j] {
                        return Err(EmpcError::InvalidArgument(format!("bad input bounds at {j}")));
                    }
                }
            }
            InputConstraints::CoupledAffine(rows) => {
                for (j, r) in rows.iter().enumerate() {
                    check_dim("coupled d_lo", r.d_lo.len(), n)?;
                    check_dim("coupled d_hi", r.d_hi.len(), n)?;
                    if !r.c_lo.is_finite() || !r.c_hi.is_finite() {
                        return Err(EmpcError::InvalidArgument("coupled offsets must be finite".into()));
                    }
                    // the gap is affine in x, so checking the box vertices covers the box
                    for v in box_vertices(&set.state_lo, &set.state_hi) {
                        let (lo, hi) = r.bounds_at(&v);
                        if lo > hi + 1e-12 {
                            return Err(EmpcError::InvalidArgument(format!(
                                "coupled input row {j} is empty at x = {v:?}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(set)
    }

    pub fn n(&self) -> usize {
        self.state_lo.len()
    }

    pub fn m(&self) -> usize {
        match &self.input {
            InputConstraints::Box { lo, .. } => lo.len(),
            InputConstraints::CoupledAffine(rows) => rows.len(),
        }
    }

    /// Number of scalar residual rows: two per state and two per input.
    pub fn num_rows(&self) -> usize {
        2 * self.n() + 2 * self.m()
    }

    /// Input interval for input `j` at state `x`.
    pub fn input_bounds(&self, j: usize, x: &[f64]) -> (f64, f64) {
        match &self.input {
            InputConstraints::Box { lo, hi } => (lo[j], hi[j]),
            InputConstraints::CoupledAffine(rows) => rows[j].bounds_at(x),
        }
    }

    /// Residual `r` (≤ 0 means satisfied), with its gradient pushed into `grad`.
    pub(crate) fn row(&self, r: usize, x: &[f64], u: &[f64], grad: &mut Vec<(LocalVar, f64)>) -> f64 {
        let n = self.n();
        if r < 2 * n {
            let i = r / 2;
            if r % 2 == 0 {
                grad.push((LocalVar::X(i), 1.0));
                x[i] - self.state_hi[i]
            } else {
                grad.push((LocalVar::X(i), -1.0));
                self.state_lo[i] - x[i]
            }
        } else {
            let j = (r - 2 * n) / 2;
            let upper = (r - 2 * n) % 2 == 0;
            match &self.input {
                InputConstraints::Box { lo, hi } => {
                    if upper {
                        grad.push((LocalVar::U(j), 1.0));
                        u[j] - hi[j]
                    } else {
                        grad.push((LocalVar::U(j), -1.0));
                        lo[j] - u[j]
                    }
                }
                InputConstraints::CoupledAffine(rows) => {
                    let row = &rows[j];
                    if upper {
                        grad.push((LocalVar::U(j), 1.0));
                        for (i, &d) in row.d_hi.iter().enumerate() {
                            if d != 0.0 {
                                grad.push((LocalVar::X(i), -d));
                            }
                        }
                        u[j] - (row.c_hi + dot(&row.d_hi, x))
                    } else {
                        grad.push((LocalVar::U(j), -1.0));
                        for (i, &d) in row.d_lo.iter().enumerate() {
                            if d != 0.0 {
                                grad.push((LocalVar::X(i), d));
                            }
                        }
                        (row.c_lo + dot(&row.d_lo, x)) - u[j]
                    }
                }
            }
        }
    }

    pub(crate) fn residuals_unchecked(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut scratch = Vec::new();
        (0..self.num_rows())
            .map(|r| {
                scratch.clear();
                self.row(r, x, u, &mut scratch)
            })
            .collect()
    }
}

impl CoupledRow {
    fn bounds_at(&self, x: &[f64]) -> (f64, f64) {
        (self.c_lo + dot(&self.d_lo, x), self.c_hi + dot(&self.d_hi, x))
    }
}

/// One residual per scalar bound, ordered per state `(x_i − hi, lo − x_i)` then per
/// input `(upper, lower)`. Membership in `Z` ⇔ every residual ≤ 0.
pub fn constraint_residuals(z: &ConstraintSet, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    check_dim("state", x.len(), z.n())?;
    check_dim("input", u.len(), z.m())?;
    Ok(z.residuals_unchecked(x, u))
}

/// One `(state exponents, input exponents, coefficient)` term of a polynomial cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostTerm {
    pub x: Vec<u32>,
    pub u: Vec<u32>,
    pub coeff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageCost {
    /// `‖u‖² + x₁⁴ − 0.5·x₁²`
    Quartic,
    /// `|x₁·x₂|`, with zero gradient on the nonsmooth set.
    AbsXy,
    Polynomial(Vec<CostTerm>),
}

impl StageCost {
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "quartic" => Ok(StageCost::Quartic),
            "absxy" => Ok(StageCost::AbsXy),
            other => Err(EmpcError::Config(format!("unknown named cost `{other}`"))),
        }
    }

    pub fn check_dims(&self, n: usize, m: usize) -> Result<()> {
        match self {
            StageCost::Quartic if n < 1 => Err(EmpcError::Config("quartic cost needs n ≥ 1".into())),
            StageCost::AbsXy if n < 2 => Err(EmpcError::Config("absxy cost needs n ≥ 2".into())),
            StageCost::Polynomial(terms) => {
                for t in terms {
                    if t.x.len() != n || t.u.len() != m {
                        return Err(EmpcError::Config(format!(
                            "cost term exponents must have lengths ({n}, {m})"
                        )));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        match self {
            StageCost::Quartic => {
                let x1 = x[0];
                u.iter().map(|v| v * v).sum::<f64>() + x1.powi(4) - 0.5 * x1 * x1
            }
            StageCost::AbsXy => (x[0] * x[1]).abs(),
            StageCost::Polynomial(terms) => terms
                .iter()
                .map(|t| t.coeff * Monomial(t.x.clone()).eval(x) * Monomial(t.u.clone()).eval(u))
                .sum(),
        }
    }

    /// Adds `scale · ∇ℓ` into `gx`, `gu`.
    pub fn add_gradient(&self, x: &[f64], u: &[f64], scale: f64, gx: &mut [f64], gu: &mut [f64]) {
        match self {
            StageCost::Quartic => {
                let x1 = x[0];
                gx[0] += scale * (4.0 * x1.powi(3) - x1);
                for (g, v) in gu.iter_mut().zip(u) {
                    *g += scale * 2.0 * v;
                }
            }
            StageCost::AbsXy => {
                let p = x[0] * x[1];
                let s = if p > 0.0 {
                    1.0
                } else if p < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                gx[0] += scale * s * x[1];
                gx[1] += scale * s * x[0];
            }
            StageCost::Polynomial(terms) => {
                for t in terms {
                    let mx = Monomial(t.x.clone());
                    let mu = Monomial(t.u.clone());
                    let vx = mx.eval(x);
                    let vu = mu.eval(u);
                    mx.add_gradient(x, scale * t.coeff * vu, gx);
                    mu.add_gradient(u, scale * t.coeff * vx, gu);
                }
            }
        }
    }

    pub fn gradient(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; x.len()];
        let mut gu = vec![0.0; u.len()];
        self.add_gradient(x, u, 1.0, &mut gx, &mut gu);
        (gx, gu)
    }
}

/// Optimal feasible steady state `(xs, us)` and its cost `ls = ℓ(xs, us)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub xs: Vec<f64>,
    pub us: Vec<f64>,
    pub ls: f64,
}

impl SteadyState {
    /// Re-checks `‖f(xs,us) − xs‖∞ ≤ 1e-8` and membership in `Z`, independently of
    /// how the point was produced.
    pub fn check(&self, sys: &SystemModel, z: &ConstraintSet) -> Result<()> {
        let next = sys.step(&self.xs, &self.us)?;
        let drift = max_abs_diff(&next, &self.xs);
        if drift > STEADY_TOL {
            return Err(EmpcError::Infeasible(format!("steady state drifts by {drift:e}")));
        }
        let worst = constraint_residuals(z, &self.xs, &self.us)?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        if worst > STEADY_TOL {
            return Err(EmpcError::Infeasible(format!("steady state violates Z by {worst:e}")));
        }
        Ok(())
    }
}

/// Best local minimizer of `ℓ` over `{x = f(x,u)} ∩ Z`, multi-started from a grid
/// with five points per state dimension.
pub fn solve_steady_state(sys: &SystemModel, cost: &StageCost, z: &ConstraintSet) -> Result<SteadyState> {
    let (n, m) = (sys.n(), sys.m());
    check_dim("constraint set state", z.n(), n)?;
    check_dim("constraint set input", z.m(), m)?;
    cost.check_dims(n, m)?;
    let problem = steady_state_problem(sys, cost, z);
    let opts = SolverOptions::default();

    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in grid_points(&z.state_lo, &z.state_hi, 5) {
        let mut z0 = start.clone();
        for j in 0..m {
            let (lo, hi) = z.input_bounds(j, &start);
            z0.push(0.0f64.clamp(lo, hi));
        }
        let sol = nlp::solve(&problem, &z0, &opts)?;
        let feasible = matches!(sol.status, SolveStatus::Optimal | SolveStatus::FeasibleSuboptimal);
        if feasible && best.as_ref().is_none_or(|(f, _)| sol.objective_value < *f) {
            best = Some((sol.objective_value, sol.z));
        }
    }
    let (_, zbest) = best.ok_or_else(|| EmpcError::Infeasible("no feasible steady state found".into()))?;
    let xs = zbest[..n].to_vec();
    let us = zbest[n..].to_vec();
    let steady = SteadyState { ls: cost.eval(&xs, &us), xs, us };
    steady.check(sys, z)?;
    Ok(steady)
}

fn steady_state_problem(sys: &SystemModel, cost: &StageCost, z: &ConstraintSet) -> NlpProblem {
    let (n, m) = (sys.n(), sys.m());
    let mut lo = z.state_lo.clone();
    let mut hi = z.state_hi.clone();
    for j in 0..m {
        match &z.input {
            InputConstraints::Box { lo: l, hi: h } => {
                lo.push(l[j]);
                hi.push(h[j]);
            }
            InputConstraints::CoupledAffine(_) => {
                lo.push(f64::NEG_INFINITY);
                hi.push(f64::INFINITY);
            }
        }
    }
    let mut p = NlpProblem::new(n + m).with_bounds(lo, hi);
    let c = cost.clone();
    p.set_objective("stage cost", move |v, g| {
        let (x, u) = v.split_at(n);
        let (gx, gu) = g.split_at_mut(n);
        c.add_gradient(x, u, 1.0, gx, gu);
        c.eval(x, u)
    });
    for i in 0..n {
        let s = sys.clone();
        p.add_eq(format!("steady x{i}"), move |v, g| {
            let (x, u) = v.split_at(n);
            for j in 0..n {
                let a = s.a(i, j) - if i == j { 1.0 } else { 0.0 };
                if a != 0.0 {
                    g.push((j, a));
                }
            }
            for j in 0..m {
                if s.b(i, j) != 0.0 {
                    g.push((n + j, s.b(i, j)));
                }
            }
            s.step_row(i, x, u) - x[i]
        });
    }
    for r in 0..z.num_rows() {
        let zz = z.clone();
        p.add_ineq(format!("state-input row {r}"), move |v, g| {
            let (x, u) = v.split_at(n);
            let mut local = Vec::with_capacity(4);
            let val = zz.row(r, x, u, &mut local);
            for (var, d) in local {
                match var {
                    LocalVar::X(i) => g.push((i, d)),
                    LocalVar::U(j) => g.push((n + j, d)),
                }
            }
            val
        });
    }
    p
}

/// Mean stage cost along the zero-input orbit of `x0`, which must close after
/// `period` steps.
pub fn orbit_average_cost(sys: &SystemModel, cost: &StageCost, x0: &[f64], period: usize) -> Result<f64> {
    check_dim("state", x0.len(), sys.n())?;
    if period == 0 {
        return Err(EmpcError::InvalidArgument("period must be ≥ 1".into()));
    }
    let u = vec![0.0; sys.m()];
    let mut x = x0.to_vec();
    let mut total = 0.0;
    for _ in 0..period {
        total += cost.eval(&x, &u);
        x = sys.step_unchecked(&x, &u);
    }
    let gap = max_abs_diff(&x, x0);
    if gap > ORBIT_CLOSURE_TOL {
        return Err(EmpcError::NotPeriodic(format!(
            "state after {period} steps differs from x0 by {gap:e}"
        )));
    }
    Ok(total / period as f64)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub(crate) fn box_vertices(lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let n = lo.len();
    (0..1usize << n)
        .map(|mask| (0..n).map(|i| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }).collect())
        .collect()
}

fn grid_points(lo: &[f64], hi: &[f64], per_dim: usize) -> Vec<Vec<f64>> {
    let mut pts = vec![Vec::new()];
    for i in 0..lo.len() {
        let mut next = Vec::with_capacity(pts.len() * per_dim);
        for p in &pts {
            for k in 0..per_dim {
                let t = k as f64 / (per_dim - 1) as f64;
                let mut q = p.clone();
                q.push(lo[i] + t * (hi[i] - lo[i]));
                next.push(q);
            }
        }
        pts = next;
    }
    pts
}

/// The constraint set used by the rotator examples:
/// `X = [−1,1]²`, `U(x) = [−1 − x₂, 1 − x₂]`.
pub fn rotator_constraints() -> ConstraintSet {
    ConstraintSet::new(
        vec![-1.0, -1.0],
        vec![1.0, 1.0],
        InputConstraints::CoupledAffine(vec![CoupledRow {
            c_lo: -1.0,
            d_lo: vec![0.0, -1.0],
            c_hi: 1.0,
            d_hi: vec![0.0, -1.0],
        }]),
    )
    .expect("rotator constraints are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rotator_step_examples() {
        let sys = SystemModel::rotator();
        assert_eq!(sys.step(&[0.5, 0.0], &[0.0]).unwrap(), vec![0.0, -0.5]);
        assert_eq!(sys.step(&[0.0, 0.0], &[0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(sys.step(&[1.0, 1.0], &[-1.0]).unwrap(), vec![0.0, -1.0]);
    }

    #[test]
    fn step_rejects_bad_dimensions() {
        let sys = SystemModel::rotator();
        assert!(matches!(sys.step(&[1.0], &[0.0]), Err(EmpcError::InvalidArgument(_))));
        assert!(matches!(sys.step(&[1.0, 0.0], &[0.0, 1.0]), Err(EmpcError::InvalidArgument(_))));
    }

    #[test]
    fn rotator_matrices() {
        let sys = SystemModel::named("rotator").unwrap();
        assert_eq!((sys.n(), sys.m()), (2, 1));
        assert_eq!([sys.a(0, 0), sys.a(0, 1), sys.a(1, 0), sys.a(1, 1)], [0.0, 1.0, -1.0, 0.0]);
        assert_eq!([sys.b(0, 0), sys.b(1, 0)], [1.0, 0.0]);
    }

    #[test]
    fn linear_model_dimension_checks() {
        assert!(SystemModel::linear(vec![vec![1.0, 0.0]], vec![vec![1.0]]).is_err());
        assert!(SystemModel::linear(vec![vec![1.0]], vec![vec![1.0], vec![2.0]]).is_err());
        let s = SystemModel::linear(vec![vec![1.0]], vec![vec![2.0]]).unwrap();
        assert_eq!(s.step(&[1.0], &[1.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn residual_examples() {
        let z = rotator_constraints();
        let r = constraint_residuals(&z, &[0.0, 0.0], &[0.0]).unwrap();
        assert_eq!(r.len(), 6);
        assert!(r[..4].iter().all(|&v| v <= -1.0));
        assert_eq!(&r[4..], &[-1.0, -1.0]);

        let r = constraint_residuals(&z, &[0.0, 1.0], &[0.5]).unwrap();
        assert_eq!(r[4], 0.5);

        let r = constraint_residuals(&z, &[1.0, 1.0], &[-1.0]).unwrap();
        assert_eq!(r.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 0.0);
    }

    #[test]
    fn empty_coupled_row_rejected() {
        let bad = InputConstraints::CoupledAffine(vec![CoupledRow {
            c_lo: 0.0,
            d_lo: vec![1.0],
            c_hi: 0.0,
            d_hi: vec![0.0],
        }]);
        assert!(ConstraintSet::new(vec![-1.0], vec![1.0], bad).is_err());
        assert!(ConstraintSet::new(vec![1.0], vec![-1.0], InputConstraints::Box { lo: vec![0.0], hi: vec![1.0] }).is_err());
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, v: &[f64], h: f64) -> Vec<f64> {
        (0..v.len())
            .map(|i| {
                let mut p = v.to_vec();
                let mut q = v.to_vec();
                p[i] += h;
                q[i] -= h;
                (f(&p) - f(&q)) / (p[i] - q[i])
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
    }

    #[test]
    fn cost_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let poly = StageCost::Polynomial(vec![
            CostTerm { x: vec![2, 1], u: vec![1], coeff: 0.7 },
            CostTerm { x: vec![0, 3], u: vec![2], coeff: -1.3 },
        ]);
        for cost in [StageCost::Quartic, StageCost::AbsXy, poly] {
            for _ in 0..100 {
                let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.99..0.99)).collect();
                let (x, u) = v.split_at(2);
                let (gx, gu) = cost.gradient(x, u);
                let fd = central_diff(|w| cost.eval(&w[..2], &w[2..]), &v, 1e-6);
                let an: Vec<f64> = gx.into_iter().chain(gu).collect();
                for (a, b) in an.iter().zip(&fd) {
                    assert!(rel_err(*a, *b) <= 1e-5, "{cost:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn absxy_gradient_zero_on_axes() {
        let (gx, _) = StageCost::AbsXy.gradient(&[0.0, 0.7], &[0.3]);
        assert_eq!(gx, vec![0.0, 0.0]);
    }

    #[test]
    fn steady_state_rotator_quartic() {
        let ss = solve_steady_state(&SystemModel::rotator(), &StageCost::Quartic, &rotator_constraints()).unwrap();
        assert!(ss.xs.iter().all(|v| v.abs() <= 1e-6), "{ss:?}");
        assert!(ss.us[0].abs() <= 1e-6);
        assert!(ss.ls.abs() <= 1e-9);
    }

    #[test]
    fn steady_state_rotator_absxy() {
        let ss = solve_steady_state(&SystemModel::rotator(), &StageCost::AbsXy, &rotator_constraints()).unwrap();
        assert!(ss.xs.iter().all(|v| v.abs() <= 1e-6), "{ss:?}");
        assert!(ss.ls.abs() <= 1e-9);
    }

    #[test]
    fn steady_state_identity_plant_matches_grid_search() {
        let sys = SystemModel::linear(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let z = ConstraintSet::new(
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
            InputConstraints::Box { lo: vec![-1.0, -1.0], hi: vec![1.0, 1.0] },
        )
        .unwrap();
        let ss = solve_steady_state(&sys, &StageCost::Quartic, &z).unwrap();
        // oracle: x = x + u forces u = 0; brute-force the cost over the state box
        let mut grid_min = f64::INFINITY;
        for i in 0..=2000 {
            let x1 = -1.0 + i as f64 * 1e-3;
            grid_min = grid_min.min(StageCost::Quartic.eval(&[x1, 0.0], &[0.0, 0.0]));
        }
        assert!(ss.us.iter().all(|v| v.abs() <= 1e-8));
        assert!((ss.ls - grid_min).abs() <= 1e-6, "{} vs {grid_min}", ss.ls);
    }

    #[test]
    fn orbit_average_examples() {
        let sys = SystemModel::rotator();
        // oracle: the four orbit states and their costs
        let states: [[f64; 2]; 4] = [[0.5, 0.0], [0.0, -0.5], [-0.5, 0.0], [0.0, 0.5]];
        let hand: f64 = states.iter().map(|s| s[0].powi(4) - 0.5 * s[0] * s[0]).sum::<f64>() / 4.0;
        assert_eq!(hand, -0.03125);
        let avg = orbit_average_cost(&sys, &StageCost::Quartic, &[0.5, 0.0], 4).unwrap();
        assert!((avg - hand).abs() <= 1e-12);
        assert_eq!(orbit_average_cost(&sys, &StageCost::Quartic, &[0.0, 0.0], 1).unwrap(), 0.0);
        assert_eq!(orbit_average_cost(&sys, &StageCost::AbsXy, &[0.5, 0.0], 4).unwrap(), 0.0);
    }

    #[test]
    fn orbit_must_close() {
        let sys = SystemModel::rotator();
        assert!(matches!(
            orbit_average_cost(&sys, &StageCost::Quartic, &[0.5, 0.0], 3),
            Err(EmpcError::NotPeriodic(_))
        ));
        assert!(orbit_average_cost(&sys, &StageCost::Quartic, &[0.5, 0.0], 0).is_err());
    }
}
