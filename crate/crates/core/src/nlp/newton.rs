//! Projected Newton continuation for box-constrained subproblems that the
//! quasi-Newton loop leaves unconverged.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

use super::projected_gradient_norm;

pub(crate) struct Options {
    pub tol: f64,
    pub max_iter: usize,
}

pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub iters: usize,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 40;
const ACTIVE_EPS: f64 = 1e-3;

/// `f` returns the value and writes the gradient; `hess` returns a symmetric
/// Hessian (or generalized Hessian) at the given point.
pub(crate) fn minimize<F, H>(mut f: F, mut hess: H, x0: &[f64], lo: &[f64], hi: &[f64], opts: &Options) -> Result<Outcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
    H: FnMut(&[f64]) -> Result<DMatrix<f64>>,
{
    let n = x0.len();
    let project = |v: &mut [f64]| {
        for i in 0..n {
            v[i] = v[i].max(lo[i]).min(hi[i]);
        }
    };
    let mut x = x0.to_vec();
    project(&mut x);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g)?;
    let mut trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];
    let mut iters = 0;
    let mut tau_last = 0.0;

    while iters < opts.max_iter {
        let pg = projected_gradient_norm(&x, &g, lo, hi);
        if pg <= opts.tol {
            break;
        }
        iters += 1;
        let eps = pg.min(ACTIVE_EPS);
        let fixed: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lo[i] + eps && g[i] > 0.0) || (x[i] >= hi[i] - eps && g[i] < 0.0))
            .collect();
        let free: Vec<usize> = (0..n).filter(|&i| !fixed[i]).collect();

        let mut d: Vec<f64> = (0..n).map(|i| -g[i]).collect();
        if !free.is_empty() {
            let h = hess(&x)?;
            if let Some(df) = newton_direction(&h, &g, &free, &mut tau_last) {
                for (k, &i) in free.iter().enumerate() {
                    d[i] = df[k];
                }
            }
        }

        let mut accepted = false;
        let mut f_trial = fx;
        for attempt in 0..2 {
            if attempt == 1 {
                // projected gradient fallback
                let gn = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                d = g.iter().map(|v| -v / gn.max(1.0)).collect();
            }
            let mut step = 1.0;
            for _ in 0..MAX_BACKTRACK {
                for i in 0..n {
                    trial[i] = x[i] + step * d[i];
                }
                project(&mut trial);
                let decrease: f64 = (0..n).map(|i| g[i] * (trial[i] - x[i])).sum();
                if !(decrease < 0.0) {
                    step *= 0.5;
                    continue;
                }
                f_trial = f(&trial, &mut g_trial)?;
                if f_trial <= fx + ARMIJO * decrease {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            break;
        }
        let progress = fx - f_trial;
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut g, &mut g_trial);
        fx = f_trial;
        if progress <= 1e-16 * (1.0 + fx.abs()) {
            break;
        }
    }
    Ok(Outcome { x, iters })
}

/// Solves `(H_FF + τI) d = −g_F`, raising `τ` until the Cholesky factorization exists.
fn newton_direction(h: &DMatrix<f64>, g: &[f64], free: &[usize], tau_last: &mut f64) -> Option<Vec<f64>> {
    let k = free.len();
    let sub = DMatrix::from_fn(k, k, |a, b| h[(free[a], free[b])]);
    let rhs = DVector::from_iterator(k, free.iter().map(|&i| -g[i]));
    let scale = (0..k).fold(0.0f64, |a, i| a.max(sub[(i, i)].abs())).max(1e-8);
    let mut tau = if *tau_last == 0.0 { 0.0 } else { (*tau_last / 3.0).max(1e-12 * scale) };
    for _ in 0..40 {
        let mut m = sub.clone();
        for i in 0..k {
            m[(i, i)] += tau;
        }
        if let Some(ch) = m.cholesky() {
            let d = ch.solve(&rhs);
            if d.iter().all(|v| v.is_finite()) {
                *tau_last = tau;
                return Some(d.iter().copied().collect());
            }
        }
        tau = if tau == 0.0 {
            1e-8 * scale
        } else if *tau_last == 0.0 {
            tau * 100.0
        } else {
            tau * 8.0
        };
    }
    None
}
