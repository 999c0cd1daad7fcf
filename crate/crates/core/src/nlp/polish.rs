//! Gauss-Newton projection onto the active constraint manifold.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

use super::NlpProblem;

const ACTIVE_SLACK: f64 = 1e-6;
const MAX_STEPS: usize = 20;
const CUTOFFS: [f64; 4] = [1e-10, 1e-7, 1e-4, 1e-2];

fn violation(p: &NlpProblem, z: &[f64]) -> f64 {
    let (e, i) = p.residuals(z);
    e.max(i)
}

/// Repeated minimum-norm corrections `J δ = −r` over the active rows, with a
/// variable on a bound held fixed only when the correction would push it out. Returns the improved point, or `None` when no
/// step reduced the violation.
pub(crate) fn project(p: &NlpProblem, z0: &[f64], mu: &[f64], tol: f64) -> Result<Option<Vec<f64>>> {
    let mut z = z0.to_vec();
    let mut viol = violation(p, &z);
    let start = viol;
    if viol <= 1e-3 * tol {
        return Ok(None);
    }
    let mut scratch = Vec::new();
    // inequality rows held at zero once a correction step has violated them
    let mut forced = vec![false; p.ineq.len()];
    let mut steps = 0;

    while steps < MAX_STEPS {
        steps += 1;
        let mut rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
        for c in &p.eq {
            scratch.clear();
            let v = (c.func)(&z, &mut scratch);
            rows.push((v, scratch.clone()));
        }
        for (j, (c, &m)) in p.ineq.iter().zip(mu).enumerate() {
            scratch.clear();
            let v = (c.func)(&z, &mut scratch);
            // rows already satisfied are only held in place
            if v > 0.0 || ((m > 0.0 || forced[j]) && v > -ACTIVE_SLACK) {
                rows.push((v.max(0.0), scratch.clone()));
            }
        }
        if rows.is_empty() {
            break;
        }

        let mut improved = false;
        let mut newly_forced = false;
        // an ill-conditioned Jacobian gives huge minimum-norm steps, so the
        // singular value cutoff is raised until a correction helps
        'cutoffs: for &cut in &CUTOFFS {
            let Some((free, delta)) = bounded_correction(p, &z, &rows, cut) else {
                break;
            };
            let mut scale = 1.0;
            for _ in 0..4 {
                let mut cand = z.clone();
                for (k, &i) in free.iter().enumerate() {
                    cand[i] = (z[i] + scale * delta[k]).max(p.var_lo[i]).min(p.var_hi[i]);
                }
                if cand.iter().any(|v| !v.is_finite()) {
                    break;
                }
                let cand_viol = violation(p, &cand);
                if cand_viol < viol {
                    z = cand;
                    viol = cand_viol;
                    improved = true;
                    break 'cutoffs;
                }
                if scale == 1.0 && cut == CUTOFFS[0] {
                    for (j, c) in p.ineq.iter().enumerate() {
                        scratch.clear();
                        if !forced[j] && (c.func)(&cand, &mut scratch) > viol {
                            forced[j] = true;
                            newly_forced = true;
                        }
                    }
                    if newly_forced {
                        break 'cutoffs;
                    }
                }
                scale *= 0.5;
            }
        }
        if !improved && !newly_forced {
            break;
        }
        if viol <= 1e-3 * tol {
            break;
        }
    }
    Ok(if viol < start { Some(z) } else { None })
}

/// Correction over the non-fixed variables; a variable on a bound is held only
/// when the correction would push it out.
fn bounded_correction(p: &NlpProblem, z: &[f64], rows: &[(f64, Vec<(usize, f64)>)], cut: f64) -> Option<(Vec<usize>, DVector<f64>)> {
    let n = p.num_vars;
    let mut blocked: Vec<bool> = (0..n).map(|i| p.var_lo[i] >= p.var_hi[i]).collect();
    loop {
        let free: Vec<usize> = (0..n).filter(|&i| !blocked[i]).collect();
        if free.is_empty() {
            return None;
        }
        let delta = correction(rows, &free, n, cut)?;
        let mut outward = false;
        for (k, &i) in free.iter().enumerate() {
            if (z[i] <= p.var_lo[i] && delta[k] < 0.0) || (z[i] >= p.var_hi[i] && delta[k] > 0.0) {
                blocked[i] = true;
                outward = true;
            }
        }
        if !outward {
            return Some((free, delta));
        }
    }
}

/// Truncated-SVD solution of `J_F δ = −r` over the columns in `free`.
fn correction(rows: &[(f64, Vec<(usize, f64)>)], free: &[usize], n: usize, cut: f64) -> Option<DVector<f64>> {
    let mut col = vec![usize::MAX; n];
    for (k, &i) in free.iter().enumerate() {
        col[i] = k;
    }
    let mut jac = DMatrix::<f64>::zeros(rows.len(), free.len());
    let mut rhs = DVector::<f64>::zeros(rows.len());
    for (r, (v, grad)) in rows.iter().enumerate() {
        rhs[r] = -v;
        for &(i, d) in grad {
            if col[i] != usize::MAX {
                jac[(r, col[i])] += d;
            }
        }
    }
    let svd = jac.svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    svd.solve(&rhs, cut * smax.max(1.0)).ok()
}
