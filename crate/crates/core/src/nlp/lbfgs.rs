//! Projected L-BFGS for box-constrained smooth minimization.

use std::collections::VecDeque;

use crate::error::Result;

use super::projected_gradient_norm;

pub(crate) struct Options {
    pub tol: f64,
    pub max_iter: usize,
    pub memory: usize,
    /// Stop after this many iterations without halving the projected gradient; 0 disables.
    pub stall_window: usize,
}

pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub iters: usize,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 40;

pub(crate) fn minimize<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &Options) -> Result<Outcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
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
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];
    let mut iters = 0;

    let mut best_pg = f64::INFINITY;
    let mut last_gain = 0;
    while iters < opts.max_iter {
        let pg = projected_gradient_norm(&x, &g, lo, hi);
        if pg <= opts.tol {
            break;
        }
        if pg < 0.5 * best_pg {
            best_pg = pg;
            last_gain = iters;
        } else if opts.stall_window > 0 && iters - last_gain >= opts.stall_window {
            break;
        }
        iters += 1;

        // variables pinned at a bound with the gradient pushing outward stay fixed
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        let mut d = two_loop(&g, &free, &mem);
        let mut slope: f64 = (0..n).map(|i| g[i] * d[i]).sum();
        if !(slope < 0.0) {
            mem.clear();
            d = (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect();
            slope = (0..n).map(|i| g[i] * d[i]).sum();
            if !(slope < 0.0) {
                break;
            }
        }

        let mut step = if mem.is_empty() {
            let dn = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if dn > 1.0 { 1.0 / dn } else { 1.0 }
        } else {
            1.0
        };
        let mut accepted = false;
        let mut f_trial = fx;
        for _ in 0..MAX_BACKTRACK {
            for i in 0..n {
                trial[i] = x[i] + step * d[i];
            }
            project(&mut trial);
            f_trial = f(&trial, &mut g_trial)?;
            let decrease: f64 = (0..n).map(|i| g[i] * (trial[i] - x[i])).sum();
            if f_trial <= fx + ARMIJO * decrease.min(0.0) && decrease < 0.0 {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if mem.is_empty() {
                break;
            }
            mem.clear();
            continue;
        }

        let s: Vec<f64> = (0..n).map(|i| trial[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_trial[i] - g[i]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        if sy > 1e-12 * ss && sy > 0.0 {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut g, &mut g_trial);
        let progress = (fx - f_trial).abs();
        fx = f_trial;
        if progress <= 1e-16 * (1.0 + fx.abs()) && projected_gradient_norm(&x, &g, lo, hi) <= 1e2 * opts.tol {
            break;
        }
    }
    Ok(Outcome { x, iters })
}

fn two_loop(g: &[f64], free: &[bool], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let n = g.len();
    let mut q: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
    let masked_dot = |a: &[f64], b: &[f64]| -> f64 { (0..n).filter(|&i| free[i]).map(|i| a[i] * b[i]).sum() };
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * masked_dot(s, &q);
        for i in 0..n {
            if free[i] {
                q[i] -= a * y[i];
            }
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let sy = masked_dot(s, y);
        let yy = masked_dot(y, y);
        if sy > 0.0 && yy > 0.0 {
            let gamma = sy / yy;
            q.iter_mut().for_each(|v| *v *= gamma);
        }
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
        let b = rho * masked_dot(y, &q);
        for i in 0..n {
            if free[i] {
                q[i] += (a - b) * s[i];
            }
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_unconstrained() {
        let f = |x: &[f64], g: &mut [f64]| -> Result<f64> {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            Ok((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
        };
        let inf = f64::INFINITY;
        let out = minimize(f, &[-1.2, 1.0], &[-inf; 2], &[inf; 2], &Options { tol: 1e-9, max_iter: 500, memory: 10, stall_window: 0 }).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6, "{:?}", out.x);
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64], g: &mut [f64]| -> Result<f64> {
            g[0] = 2.0 * (x[0] - 3.0);
            g[1] = 2.0 * (x[1] + 3.0);
            Ok((x[0] - 3.0).powi(2) + (x[1] + 3.0).powi(2))
        };
        let out = minimize(f, &[0.0, 0.0], &[-1.0, -1.0], &[1.0, 1.0], &Options { tol: 1e-10, max_iter: 100, memory: 5, stall_window: 0 }).unwrap();
        assert_eq!(out.x, vec![1.0, -1.0]);
    }
}
