//! Monomials over a real vector, shared by polynomial costs, storage bases and
//! terminal penalties.

use serde::{Deserialize, Serialize};

/// `∏ⱼ vⱼ^{eⱼ}` for a fixed exponent vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Monomial(pub Vec<u32>);

impl Monomial {
    pub fn new(exps: Vec<u32>) -> Self {
        Monomial(exps)
    }

    pub fn arity(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_constant(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.0.len());
        self.0
            .iter()
            .zip(v)
            .filter(|(&e, _)| e > 0)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }

    /// Adds `scale · ∂/∂vⱼ` of the monomial into `grad`.
    pub fn add_gradient(&self, v: &[f64], scale: f64, grad: &mut [f64]) {
        for (j, &ej) in self.0.iter().enumerate() {
            if ej == 0 {
                continue;
            }
            let mut d = scale * ej as f64 * v[j].powi(ej as i32 - 1);
            for (i, (&ei, &xi)) in self.0.iter().zip(v).enumerate() {
                if i != j && ei > 0 {
                    d *= xi.powi(ei as i32);
                }
            }
            grad[j] += d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_and_gradient() {
        let m = Monomial::new(vec![2, 1]);
        assert_eq!(m.eval(&[3.0, -2.0]), -18.0);
        let mut g = [0.0; 2];
        m.add_gradient(&[3.0, -2.0], 1.0, &mut g);
        assert_eq!(g, [-12.0, 9.0]);
        assert!(Monomial::new(vec![0, 0]).is_constant());
        assert_eq!(Monomial::new(vec![0, 0]).eval(&[0.0, 0.0]), 1.0);
    }
}
