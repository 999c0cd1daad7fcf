//! Newton iterations on the KKT system of the current active set, started from
//! a nearly feasible augmented-Lagrangian iterate.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

use super::{augmented_lagrangian_hessian, projected_gradient_norm, Evaluation, NlpProblem, SolverOptions};

const MAX_STEPS: usize = 12;
const MAX_ACTIVE_UPDATES: usize = 6;
const ACTIVE_SLACK: f64 = 1e-8;
const DUAL_REG: f64 = 1e-12;
const PRIMAL_REG: f64 = 1e-8;

pub(crate) struct Refined {
    pub z: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub eval: Evaluation,
    pub stationarity: f64,
}

fn stationarity(p: &NlpProblem, z: &[f64], e: &Evaluation, lambda: &[f64], mu: &[f64]) -> f64 {
    projected_gradient_norm(z, &e.lagrangian_gradient(lambda, mu), &p.var_lo, &p.var_hi)
}

/// Returns a point meeting both tolerances with an objective no worse than the
/// start, or `None`.
pub(crate) fn refine(p: &NlpProblem, z0: &[f64], lambda0: &[f64], mu0: &[f64], opts: &SolverOptions) -> Result<Option<Refined>> {
    let n = p.num_vars;
    let (n_eq, n_in) = (p.eq.len(), p.ineq.len());
    let mut z = z0.to_vec();
    let mut lambda = lambda0.to_vec();
    let mut mu = mu0.to_vec();
    let mut eval = p.evaluate(&z)?;
    let (f0, c0, g0) = (eval.f, eval.c.clone(), eval.g.clone());
    let merit = |e: &Evaluation, s: f64| (e.infeasibility() / opts.feasibility_tol).max(s / opts.stationarity_tol);
    let mut current = merit(&eval, stationarity(p, &z, &eval, &lambda, &mu));
    let mut active: Vec<bool> = (0..n_in).map(|i| mu[i] > 0.0 || eval.g[i] > -ACTIVE_SLACK).collect();

    for _ in 0..MAX_STEPS {
        let grad_l = eval.lagrangian_gradient(&lambda, &mu);
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let at_lo = z[i] <= p.var_lo[i] && grad_l[i] >= 0.0;
                let at_hi = z[i] >= p.var_hi[i] && grad_l[i] <= 0.0;
                p.var_lo[i] < p.var_hi[i] && !at_lo && !at_hi
            })
            .collect();
        let mut col = vec![usize::MAX; n];
        for (k, &i) in free.iter().enumerate() {
            col[i] = k;
        }
        let hess = augmented_lagrangian_hessian(p, &z, &lambda, &mu, 0.0)?;

        let mut next = None;
        for _ in 0..MAX_ACTIVE_UPDATES {
            // rows: all equalities, then the active inequalities
            let rows: Vec<(bool, usize)> = (0..n_eq)
                .map(|i| (true, i))
                .chain((0..n_in).filter(|&i| active[i]).map(|i| (false, i)))
                .filter(|&(eq, i)| {
                    let jac = if eq { &eval.c_jac[i] } else { &eval.g_jac[i] };
                    jac.iter().any(|&(j, d)| col[j] != usize::MAX && d != 0.0)
                })
                .collect();
            let (nf, nr) = (free.len(), rows.len());
            let mut k = DMatrix::<f64>::zeros(nf + nr, nf + nr);
            let mut rhs = DVector::<f64>::zeros(nf + nr);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    k[(a, b)] = hess[(i, j)];
                }
                k[(a, a)] += PRIMAL_REG;
                rhs[a] = -eval.grad[i];
            }
            for (r, &(eq, i)) in rows.iter().enumerate() {
                let (jac, v) = if eq { (&eval.c_jac[i], eval.c[i]) } else { (&eval.g_jac[i], eval.g[i]) };
                for &(j, d) in jac {
                    if col[j] != usize::MAX {
                        k[(nf + r, col[j])] += d;
                        k[(col[j], nf + r)] += d;
                    }
                }
                k[(nf + r, nf + r)] = -DUAL_REG;
                rhs[nf + r] = -v;
            }
            let sol = match k.lu().solve(&rhs) {
                Some(s) if s.iter().all(|v| v.is_finite()) => s,
                _ => return Ok(None),
            };
            let mut new_lambda = vec![0.0; n_eq];
            let mut new_mu = vec![0.0; n_in];
            let mut dropped = false;
            for (r, &(eq, i)) in rows.iter().enumerate() {
                let y = sol[nf + r];
                if eq {
                    new_lambda[i] = y;
                } else if y < 0.0 {
                    active[i] = false;
                    dropped = true;
                } else {
                    new_mu[i] = y;
                }
            }
            if dropped {
                continue;
            }
            let mut cand = z.clone();
            for (a, &i) in free.iter().enumerate() {
                cand[i] = (z[i] + sol[a]).clamp(p.var_lo[i], p.var_hi[i]);
            }
            let cand_eval = p.evaluate(&cand)?;
            let mut added = false;
            for i in 0..n_in {
                if !active[i] && cand_eval.g[i] > opts.feasibility_tol {
                    active[i] = true;
                    added = true;
                }
            }
            if added {
                continue;
            }
            next = Some((cand, cand_eval, new_lambda, new_mu));
            break;
        }
        let Some((cand, cand_eval, new_lambda, new_mu)) = next else {
            return Ok(None);
        };
        let stat = stationarity(p, &cand, &cand_eval, &new_lambda, &new_mu);
        let m = merit(&cand_eval, stat);
        if !(m < current) {
            return Ok(None);
        }
        current = m;
        z = cand;
        eval = cand_eval;
        lambda = new_lambda;
        mu = new_mu;
        if m <= 1.0 {
            // first-order price of removing the start's infeasibility
            let price: f64 = c0.iter().zip(&lambda).map(|(c, l)| (c * l).abs()).sum::<f64>()
                + g0.iter().zip(&mu).map(|(g, m)| g.max(0.0) * m).sum::<f64>();
            if eval.f > f0 + price + 1e-9 * (1.0 + f0.abs()) {
                return Ok(None);
            }
            return Ok(Some(Refined { z, lambda, mu, eval, stationarity: stat }));
        }
        for i in 0..n_in {
            active[i] = mu[i] > 0.0 || eval.g[i] > -ACTIVE_SLACK;
        }
    }
    Ok(None)
}
