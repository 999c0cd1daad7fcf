use serde::{Deserialize, Serialize};

use crate::error::{EmpcError, Result};
use crate::model::{dot, SteadyState};
use crate::monomial::Monomial;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalMode {
    Equality,
    Region,
}

impl TerminalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TerminalMode::Equality => "equality",
            TerminalMode::Region => "region",
        }
    }
}

/// `coeff · ∏ xⱼ^{eⱼ}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyTerm {
    pub monomial: Monomial,
    pub coeff: f64,
}

/// Terminal set `X_f = {x : E·x = e, lo ≤ x ≤ hi}`, penalty `V_f` and policy
/// `κ_f(x) = K·x + k`. Equality mode is the special case `E = I`, `e = xs`,
/// `V_f ≡ 0`, `κ_f ≡ us`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalIngredients {
    mode: TerminalMode,
    e_matrix: Vec<Vec<f64>>,
    e_vector: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    penalty: Vec<PenaltyTerm>,
    gain: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

const MEMBERSHIP_TOL: f64 = 1e-9;

impl TerminalIngredients {
    pub fn equality(steady: &SteadyState, state_lo: &[f64], state_hi: &[f64]) -> Self {
        let n = steady.xs.len();
        let m = steady.us.len();
        let e_matrix = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        TerminalIngredients {
            mode: TerminalMode::Equality,
            e_matrix,
            e_vector: steady.xs.clone(),
            lo: state_lo.to_vec(),
            hi: state_hi.to_vec(),
            penalty: Vec::new(),
            gain: vec![vec![0.0; n]; m],
            offset: steady.us.clone(),
        }
    }

    /// Validates dimensions, that `X_f` lies in the state box, that `xs ∈ X_f`
    /// strictly inside every non-degenerate box side, and that `κ_f(xs) = us`.
    #[allow(clippy::too_many_arguments)]
    pub fn region(
        e_matrix: Vec<Vec<f64>>,
        e_vector: Vec<f64>,
        lo: Vec<f64>,
        hi: Vec<f64>,
        penalty: Vec<PenaltyTerm>,
        gain: Vec<Vec<f64>>,
        offset: Vec<f64>,
        steady: &SteadyState,
        state_lo: &[f64],
        state_hi: &[f64],
    ) -> Result<Self> {
        let n = steady.xs.len();
        let m = steady.us.len();
        let bad = |msg: String| Err(EmpcError::Config(msg));
        if e_matrix.len() != e_vector.len() || e_matrix.iter().any(|r| r.len() != n) {
            return bad(format!("terminal E must be r×{n} with matching e"));
        }
        if lo.len() != n || hi.len() != n {
            return bad(format!("terminal box must have {n} entries"));
        }
        if gain.len() != m || gain.iter().any(|r| r.len() != n) || offset.len() != m {
            return bad(format!("terminal policy must be {m}×{n} with {m} offsets"));
        }
        if penalty.iter().any(|t| t.monomial.arity() != n) {
            return bad(format!("terminal penalty monomials must have arity {n}"));
        }
        for i in 0..n {
            if !(lo[i] <= hi[i]) || lo[i] < state_lo[i] - MEMBERSHIP_TOL || hi[i] > state_hi[i] + MEMBERSHIP_TOL {
                return bad(format!("terminal box coordinate {i} must lie inside the state box"));
            }
        }
        let term = TerminalIngredients {
            mode: TerminalMode::Region,
            e_matrix,
            e_vector,
            lo,
            hi,
            penalty,
            gain,
            offset,
        };
        if term.membership_residual(&steady.xs) > MEMBERSHIP_TOL {
            return bad("xs must belong to the terminal region".into());
        }
        for i in 0..n {
            if term.lo[i] < term.hi[i] && !(term.lo[i] < steady.xs[i] && steady.xs[i] < term.hi[i]) {
                return bad(format!("xs must be interior to the terminal box in coordinate {i}"));
            }
        }
        let k = term.kappa(&steady.xs);
        if k.iter().zip(&steady.us).any(|(a, b)| (a - b).abs() > MEMBERSHIP_TOL) {
            return bad("terminal policy must satisfy κ_f(xs) = us".into());
        }
        Ok(term)
    }

    pub fn mode(&self) -> TerminalMode {
        self.mode
    }

    pub fn e_matrix(&self) -> &[Vec<f64>] {
        &self.e_matrix
    }

    pub fn e_vector(&self) -> &[f64] {
        &self.e_vector
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn penalty(&self) -> &[PenaltyTerm] {
        &self.penalty
    }

    pub fn gain(&self) -> &[Vec<f64>] {
        &self.gain
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn kappa(&self, x: &[f64]) -> Vec<f64> {
        self.gain.iter().zip(&self.offset).map(|(row, k)| dot(row, x) + k).collect()
    }

    pub fn vf(&self, x: &[f64]) -> f64 {
        self.penalty.iter().map(|t| t.coeff * t.monomial.eval(x)).sum()
    }

    pub(crate) fn add_vf_grad(&self, x: &[f64], scale: f64, grad: &mut [f64]) {
        for t in &self.penalty {
            t.monomial.add_gradient(x, scale * t.coeff, grad);
        }
    }

    /// Max of `|E·x − e|` and the box violation.
    pub fn membership_residual(&self, x: &[f64]) -> f64 {
        let eq = self
            .e_matrix
            .iter()
            .zip(&self.e_vector)
            .map(|(row, e)| (dot(row, x) - e).abs())
            .fold(0.0, f64::max);
        let bx = x
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&v, (&l, &h))| (l - v).max(v - h).max(0.0))
            .fold(0.0, f64::max);
        eq.max(bx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn steady() -> SteadyState {
        SteadyState { xs: vec![0.0, 0.0], us: vec![0.0], ls: 0.0 }
    }

    fn axis_region(gain: Vec<Vec<f64>>) -> Result<TerminalIngredients> {
        TerminalIngredients::region(
            vec![vec![1.0, 0.0]],
            vec![0.0],
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
            vec![PenaltyTerm { monomial: Monomial::new(vec![0, 2]), coeff: 1.0 }],
            gain,
            vec![0.0],
            &steady(),
            &[-1.0, -1.0],
            &[1.0, 1.0],
        )
    }

    #[test]
    fn axis_region_ingredients() {
        let t = axis_region(vec![vec![0.0, -1.0]]).unwrap();
        assert_eq!(t.kappa(&[0.0, 0.3]), vec![-0.3]);
        assert_eq!(t.vf(&[0.0, 0.5]), 0.25);
        assert_eq!(t.membership_residual(&[0.0, 0.7]), 0.0);
        assert_eq!(t.membership_residual(&[0.2, 0.7]), 0.2);
    }

    #[test]
    fn policy_must_fix_steady_state() {
        let mut s = steady();
        s.us = vec![0.5];
        let err = TerminalIngredients::region(
            vec![vec![1.0, 0.0]],
            vec![0.0],
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
            vec![],
            vec![vec![0.0, -1.0]],
            vec![0.0],
            &s,
            &[-1.0, -1.0],
            &[1.0, 1.0],
        );
        assert!(matches!(err, Err(EmpcError::Config(_))));
    }

    #[test]
    fn equality_mode_is_identity_region() {
        let t = TerminalIngredients::equality(&steady(), &[-1.0, -1.0], &[1.0, 1.0]);
        assert_eq!(t.mode(), TerminalMode::Equality);
        assert_eq!(t.membership_residual(&[0.0, 0.0]), 0.0);
        assert_eq!(t.membership_residual(&[0.0, 0.1]), 0.1);
        assert_eq!(t.vf(&[0.3, 0.3]), 0.0);
        assert_eq!(t.kappa(&[0.3, 0.3]), vec![0.0]);
    }
}
