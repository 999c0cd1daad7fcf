//! Parameter-varying storage functions `λ(θ, x) = θᵀφ(x)` over a monomial basis,
//! the positive-definite margin `ρ`, and the strict controlled-dissipation residual.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, EmpcError, Result};
use crate::model::{SteadyState, StageCost};
use crate::monomial::Monomial;

/// Tolerance for parameter box membership and pinned-coordinate agreement.
pub const THETA_TOL: f64 = 1e-9;

/// Storage family with a compact parameter box `Θ` and optionally pinned coefficients.
///
/// Continuity in `(θ, x)` and compactness of `Θ` hold by construction: the basis is
/// polynomial and every bound is finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageFamily {
    basis: Vec<Monomial>,
    theta_lo: Vec<f64>,
    theta_hi: Vec<f64>,
    pinned: Vec<(usize, f64)>,
}

impl StorageFamily {
    pub fn new(
        basis: Vec<Monomial>,
        theta_lo: Vec<f64>,
        theta_hi: Vec<f64>,
        pinned: Vec<(usize, f64)>,
    ) -> Result<Self> {
        let p = basis.len();
        check_dim("theta_lo", theta_lo.len(), p)?;
        check_dim("theta_hi", theta_hi.len(), p)?;
        if let Some(first) = basis.first() {
            if basis.iter().any(|b| b.arity() != first.arity()) {
                return Err(EmpcError::InvalidArgument("basis monomials must share arity".into()));
            }
        }
        for i in 0..p {
            if !(theta_lo[i].is_finite() && theta_hi[i].is_finite()) {
                return Err(EmpcError::InvalidArgument(format!("theta bound {i} is not finite")));
            }
            if theta_lo[i] > theta_hi[i] {
                return Err(EmpcError::InvalidArgument(format!("theta_lo[{i}] > theta_hi[{i}]")));
            }
        }
        let mut seen = vec![false; p];
        for &(i, v) in &pinned {
            if i >= p {
                return Err(EmpcError::InvalidArgument(format!("pinned index {i} out of range")));
            }
            if seen[i] {
                return Err(EmpcError::InvalidArgument(format!("coefficient {i} pinned twice")));
            }
            seen[i] = true;
            if v < theta_lo[i] || v > theta_hi[i] {
                return Err(EmpcError::InvalidArgument(format!("pinned value for {i} outside its bounds")));
            }
        }
        Ok(StorageFamily { basis, theta_lo, theta_hi, pinned })
    }

    /// `Θ = [−bound, bound]^p`.
    pub fn symmetric(basis: Vec<Monomial>, bound: f64, pinned: Vec<(usize, f64)>) -> Result<Self> {
        let p = basis.len();
        Self::new(basis, vec![-bound; p], vec![bound; p], pinned)
    }

    /// `a₁x₁² + a₂x₂² + a₃x₁x₂ + a₄x₁ + a₅x₂ + a₆`.
    pub fn quadratic_basis() -> Vec<Monomial> {
        [[2, 0], [0, 2], [1, 1], [1, 0], [0, 1], [0, 0]]
            .into_iter()
            .map(|e| Monomial::new(e.to_vec()))
            .collect()
    }

    /// `a₁x₁⁴ + a₂x₁³ + a₃x₁² + a₄x₁ + a₅`.
    pub fn quartic_basis() -> Vec<Monomial> {
        [[4, 0], [3, 0], [2, 0], [1, 0], [0, 0]]
            .into_iter()
            .map(|e| Monomial::new(e.to_vec()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[Monomial] {
        &self.basis
    }

    pub fn theta_lo(&self) -> &[f64] {
        &self.theta_lo
    }

    pub fn theta_hi(&self) -> &[f64] {
        &self.theta_hi
    }

    pub fn pinned(&self) -> &[(usize, f64)] {
        &self.pinned
    }

    pub fn is_pinned(&self, i: usize) -> bool {
        self.pinned.iter().any(|&(j, _)| j == i)
    }

    /// Zero vector clamped into `Θ`, with pins applied.
    pub fn default_theta(&self) -> Vec<f64> {
        let mut th: Vec<f64> = (0..self.num_params())
            .map(|i| 0.0f64.clamp(self.theta_lo[i], self.theta_hi[i]))
            .collect();
        self.apply_pins(&mut th);
        th
    }

    pub fn apply_pins(&self, theta: &mut [f64]) {
        for &(i, v) in &self.pinned {
            theta[i] = v;
        }
    }

    /// Checks `θ ∈ Θ` (±1e-9) with pinned coordinates respected.
    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        check_dim("theta", theta.len(), self.num_params())?;
        for (i, &t) in theta.iter().enumerate() {
            if !(t >= self.theta_lo[i] - THETA_TOL && t <= self.theta_hi[i] + THETA_TOL) {
                return Err(EmpcError::Domain(format!(
                    "theta[{i}] = {t} outside [{}, {}]",
                    self.theta_lo[i], self.theta_hi[i]
                )));
            }
        }
        for &(i, v) in &self.pinned {
            if (theta[i] - v).abs() > THETA_TOL {
                return Err(EmpcError::Domain(format!("theta[{i}] = {} but is pinned to {v}", theta[i])));
            }
        }
        Ok(())
    }

    /// Worst violation of the box and pins (0 when `θ ∈ Θ`).
    pub fn theta_violation(&self, theta: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, &t) in theta.iter().enumerate() {
            worst = worst.max(self.theta_lo[i] - t).max(t - self.theta_hi[i]);
        }
        for &(i, v) in &self.pinned {
            worst = worst.max((theta[i] - v).abs());
        }
        worst
    }

    pub(crate) fn features_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.basis.iter().map(|b| b.eval(x)).collect()
    }

    pub(crate) fn eval_unchecked(&self, theta: &[f64], x: &[f64]) -> f64 {
        self.basis.iter().zip(theta).map(|(b, t)| t * b.eval(x)).sum()
    }

    /// Adds `scale · ∂λ/∂x` into `grad`.
    pub(crate) fn add_grad_x(&self, theta: &[f64], x: &[f64], scale: f64, grad: &mut [f64]) {
        for (b, &t) in self.basis.iter().zip(theta) {
            if t != 0.0 {
                b.add_gradient(x, scale * t, grad);
            }
        }
    }

    /// Whether `λ(θ, xs) = 0` for every `θ ∈ Θ`: every free coefficient multiplies a
    /// monomial vanishing at `xs`, and the pinned part sums to zero there.
    pub fn vanishes_at(&self, xs: &[f64]) -> bool {
        let phi = self.features_unchecked(xs);
        let free_ok = phi
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.is_pinned(*i))
            .all(|(i, v)| v.abs() <= 1e-12 || (self.theta_lo[i] == 0.0 && self.theta_hi[i] == 0.0));
        let pinned_sum: f64 = self.pinned.iter().map(|&(i, v)| v * phi[i]).sum();
        free_ok && pinned_sum.abs() <= 1e-12
    }
}

/// `ρ(v) = ϱ·‖v‖₂²`; `ϱ = 0` degenerates to non-strict dissipativity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoFunction {
    weight: f64,
}

impl RhoFunction {
    pub fn new(weight: f64) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(EmpcError::InvalidArgument(format!("rho weight must be ≥ 0, got {weight}")));
        }
        Ok(RhoFunction { weight })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        self.weight * v.iter().map(|a| a * a).sum::<f64>()
    }

    /// `ρ(x − xs)`.
    pub fn eval_offset(&self, x: &[f64], xs: &[f64]) -> f64 {
        self.weight * x.iter().zip(xs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }
}

/// Monomial features `φᵢ(x) = ∏ⱼ xⱼ^{eᵢⱼ}`.
pub fn features(fam: &StorageFamily, x: &[f64]) -> Result<Vec<f64>> {
    if let Some(b) = fam.basis.first() {
        check_dim("state", x.len(), b.arity())?;
    }
    Ok(fam.features_unchecked(x))
}

/// `λ(θ, x) = θᵀφ(x)`, rejecting `θ ∉ Θ`.
pub fn storage_eval(fam: &StorageFamily, theta: &[f64], x: &[f64]) -> Result<f64> {
    fam.check_theta(theta)?;
    let phi = features(fam, x)?;
    Ok(phi.iter().zip(theta).map(|(p, t)| p * t).sum())
}

/// `λ(θ⁺, x⁺) − λ(θ, x) − ℓ(x, u) + ℓ(xs, us) + ρ(x − xs)`; a value ≤ 0 means the
/// strict controlled-dissipation inequality holds on this transition. `xnext` is
/// taken as given.
#[allow(clippy::too_many_arguments)]
pub fn dissipation_residual(
    fam: &StorageFamily,
    rho: &RhoFunction,
    cost: &StageCost,
    steady: &SteadyState,
    theta: &[f64],
    theta_plus: &[f64],
    x: &[f64],
    u: &[f64],
    xnext: &[f64],
) -> Result<f64> {
    fam.check_theta(theta)?;
    fam.check_theta(theta_plus)?;
    Ok(dissipation_residual_unchecked(fam, rho, cost, steady, theta, theta_plus, x, u, xnext))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dissipation_residual_unchecked(
    fam: &StorageFamily,
    rho: &RhoFunction,
    cost: &StageCost,
    steady: &SteadyState,
    theta: &[f64],
    theta_plus: &[f64],
    x: &[f64],
    u: &[f64],
    xnext: &[f64],
) -> f64 {
    fam.eval_unchecked(theta_plus, xnext) - fam.eval_unchecked(theta, x) - cost.eval(x, u)
        + steady.ls
        + rho.eval_offset(x, &steady.xs)
}
