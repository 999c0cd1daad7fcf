//! Independent verification of solver output: KKT residuals and finite-difference
//! gradient checks.

use serde::{Deserialize, Serialize};

use super::{projected_gradient_norm, NlpProblem, NlpSolution};

const SIGN_TOL: f64 = -1e-8;
const SLACK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockResidual {
    pub label: String,
    pub equality: bool,
    pub rows: usize,
    /// `max |c|` for equalities, `max(0, g)` for inequalities.
    pub max_residual: f64,
    pub min_multiplier: f64,
    pub max_complementarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub blocks: Vec<BlockResidual>,
    pub stationarity_inf: f64,
    pub violations: Vec<String>,
}

impl KktReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Recomputes residuals at `sol.z` directly from the problem callables and
/// groups them by block label.
pub fn kkt_report(p: &NlpProblem, sol: &NlpSolution) -> KktReport {
    let z = &sol.z;
    let mut blocks: Vec<BlockResidual> = Vec::new();
    let mut lagr = vec![0.0; p.num_vars];
    (p.objective)(z, &mut lagr);
    let mut row = Vec::new();

    let push = |label: &str, equality: bool, value: f64, mult: f64, blocks: &mut Vec<BlockResidual>| {
        let residual = if equality { value.abs() } else { value.max(0.0) };
        let comp = if equality { 0.0 } else { (mult * value).abs() };
        let idx = match blocks.iter().position(|b| b.label == label && b.equality == equality) {
            Some(i) => i,
            None => {
                blocks.push(BlockResidual {
                    label: label.to_string(),
                    equality,
                    rows: 0,
                    max_residual: 0.0,
                    min_multiplier: f64::INFINITY,
                    max_complementarity: 0.0,
                });
                blocks.len() - 1
            }
        };
        let b = &mut blocks[idx];
        b.rows += 1;
        b.max_residual = b.max_residual.max(residual);
        b.min_multiplier = b.min_multiplier.min(mult);
        b.max_complementarity = b.max_complementarity.max(comp);
    };

    for (i, c) in p.eq.iter().enumerate() {
        row.clear();
        let v = (c.func)(z, &mut row);
        let l = sol.multipliers.eq.get(i).copied().unwrap_or(0.0);
        for &(j, d) in &row {
            lagr[j] += l * d;
        }
        push(&c.label, true, v, l, &mut blocks);
    }
    for (i, c) in p.ineq.iter().enumerate() {
        row.clear();
        let v = (c.func)(z, &mut row);
        let m = sol.multipliers.ineq.get(i).copied().unwrap_or(0.0);
        for &(j, d) in &row {
            lagr[j] += m * d;
        }
        push(&c.label, false, v, m, &mut blocks);
    }

    let stationarity_inf = projected_gradient_norm(z, &lagr, &p.var_lo, &p.var_hi);
    let mut violations = Vec::new();
    for b in &blocks {
        if b.max_residual > 1e-8 {
            violations.push(format!("{}: residual {:e}", b.label, b.max_residual));
        }
        if !b.equality && b.min_multiplier < SIGN_TOL {
            violations.push(format!("{}: negative multiplier {:e}", b.label, b.min_multiplier));
        }
        if b.max_complementarity > SLACK_TOL {
            violations.push(format!("{}: complementarity {:e}", b.label, b.max_complementarity));
        }
    }
    if stationarity_inf > 1e-6 {
        violations.push(format!("stationarity {stationarity_inf:e}"));
    }
    KktReport { blocks, stationarity_inf, violations }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub label: String,
    pub variable: usize,
}

/// Central differences against every supplied gradient. Relative error is
/// `|a − b| / max(1, |a|, |b|)`.
pub fn grad_check(p: &NlpProblem, z: &[f64], h: f64) -> GradCheck {
    let n = p.num_vars;
    let rows: Vec<&super::Constraint> = p.eq.iter().chain(p.ineq.iter()).collect();

    let mut g_obj = vec![0.0; n];
    (p.objective)(z, &mut g_obj);
    let mut jac = vec![vec![0.0; n]; rows.len()];
    let mut scratch = Vec::new();
    for (r, c) in rows.iter().enumerate() {
        scratch.clear();
        (c.func)(z, &mut scratch);
        for &(i, d) in &scratch {
            jac[r][i] += d;
        }
    }

    let mut worst = GradCheck { max_rel_error: 0.0, label: String::new(), variable: 0 };
    let record = |err: f64, label: &str, var: usize, worst: &mut GradCheck| {
        if err > worst.max_rel_error || worst.label.is_empty() {
            *worst = GradCheck { max_rel_error: err, label: label.to_string(), variable: var };
        }
    };
    let mut zp = z.to_vec();
    let mut zm = z.to_vec();
    let mut buf = vec![0.0; n];
    for i in 0..n {
        zp[i] = z[i] + h;
        zm[i] = z[i] - h;
        let denom = zp[i] - zm[i];
        let fp = (p.objective)(&zp, &mut buf);
        buf.iter_mut().for_each(|v| *v = 0.0);
        let fm = (p.objective)(&zm, &mut buf);
        buf.iter_mut().for_each(|v| *v = 0.0);
        record(rel((fp - fm) / denom, g_obj[i]), &p.objective_label, i, &mut worst);
        for (r, c) in rows.iter().enumerate() {
            scratch.clear();
            let vp = (c.func)(&zp, &mut scratch);
            scratch.clear();
            let vm = (c.func)(&zm, &mut scratch);
            record(rel((vp - vm) / denom, jac[r][i]), &c.label, i, &mut worst);
        }
        zp[i] = z[i];
        zm[i] = z[i];
    }
    worst
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::super::{solve, SolverOptions};
    use super::*;

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

    fn bowl() -> NlpProblem {
        let mut p = NlpProblem::new(2);
        p.set_objective("bowl", |z, g| {
            g[0] = 2.0 * (z[0] - 1.0);
            g[1] = 4.0 * z[1].powi(3);
            (z[0] - 1.0).powi(2) + z[1].powi(4)
        });
        p
    }

    #[test]
    fn active_inequality_multiplier() {
        let p = active_ineq();
        let s = solve(&p, &[0.0], &SolverOptions::default()).unwrap();
        let r = kkt_report(&p, &s);
        assert!(r.is_clean(), "{r:?}");
        let cap = &r.blocks[0];
        assert!((cap.min_multiplier - 1.0).abs() < 1e-6);
        assert!(cap.max_complementarity <= 1e-8);
    }

    #[test]
    fn unconstrained_optimum_is_clean() {
        let p = bowl();
        let s = solve(&p, &[0.0, 0.5], &SolverOptions::default()).unwrap();
        let r = kkt_report(&p, &s);
        assert!(r.blocks.is_empty());
        assert!(r.is_clean(), "{r:?}");
    }

    #[test]
    fn perturbed_point_flags_stationarity() {
        let p = bowl();
        let mut s = solve(&p, &[0.0, 0.5], &SolverOptions::default()).unwrap();
        s.z.iter_mut().for_each(|v| *v += 0.1);
        let r = kkt_report(&p, &s);
        assert!(r.stationarity_inf > 1e-3);
        assert!(!r.is_clean());
    }

    #[test]
    fn linear_block_exact() {
        let mut p = NlpProblem::new(3);
        p.add_eq("linear", |z, g| {
            g.extend([(0, 0.5), (1, -2.0), (2, 0.25)]);
            0.5 * z[0] - 2.0 * z[1] + 0.25 * z[2] - 1.0
        });
        let h = 2f64.powi(-20);
        let r = grad_check(&p, &[0.5, -0.25, 0.125], h);
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
    }

    #[test]
    fn wrong_gradient_flagged() {
        let mut p = NlpProblem::new(2);
        p.set_objective("wrong", |z, g| {
            g[0] = 2.0 * z[0];
            g[1] = 3.0 * z[1];
            z[0] * z[0] + z[1] * z[1]
        });
        p.add_ineq("fine", |z, g| {
            g.push((0, 1.0));
            z[0]
        });
        let r = grad_check(&p, &[0.3, 0.7], 1e-6);
        assert!(r.max_rel_error >= 1e-2);
        assert_eq!(r.label, "wrong");
        assert_eq!(r.variable, 1);
    }
}
