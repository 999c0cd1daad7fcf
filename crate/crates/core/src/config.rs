//! TOML experiment configuration.
//!
//! ```toml
//! [system]
//! model = "rotator"
//! [constraints]
//! state_lo = [-1.0, -1.0]
//! state_hi = [1.0, 1.0]
//! coupled = [{ c_lo = -1.0, d_lo = [0.0, -1.0], c_hi = 1.0, d_hi = [0.0, -1.0] }]
//! [cost]
//! kind = "quartic"
//! [storage]
//! basis = "quadratic"
//! theta_bound = 5.0
//! [rho]
//! weight = 0.2
//! [terminal]
//! mode = "equality"
//! [horizon]
//! n = 20
//! [sim]
//! steps = 100
//! x0 = [1.0, 1.0]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EmpcError, Result};
use crate::model::{solve_steady_state, ConstraintSet, CostTerm, CoupledRow, InputConstraints, StageCost, SystemModel};
use crate::monomial::Monomial;
use crate::nlp::SolverOptions;
use crate::ocp::{ExperimentConfig, PenaltyTerm, TerminalIngredients};
use crate::storage::{RhoFunction, StorageFamily};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub system: SystemSection,
    pub constraints: ConstraintsSection,
    pub cost: CostSection,
    pub storage: StorageSection,
    pub rho: RhoSection,
    pub terminal: TerminalSection,
    pub horizon: HorizonSection,
    pub sim: SimSection,
    #[serde(default)]
    pub solver: SolverOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// `rotator` or `linear`.
    pub model: String,
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsSection {
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    pub input_lo: Option<Vec<f64>>,
    pub input_hi: Option<Vec<f64>>,
    pub coupled: Option<Vec<CoupledRow>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    /// `quartic`, `absxy` or `polynomial`.
    pub kind: String,
    pub terms: Option<Vec<CostTerm>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinSpec {
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageSection {
    /// `quadratic`, `quartic` or `custom` (with `monomials`).
    pub basis: String,
    pub monomials: Option<Vec<Vec<u32>>>,
    pub theta_bound: Option<f64>,
    pub theta_lo: Option<Vec<f64>>,
    pub theta_hi: Option<Vec<f64>>,
    #[serde(default)]
    pub pinned: Vec<PinSpec>,
    pub theta0: Option<Vec<f64>>,
    #[serde(default = "yes")]
    pub enforce_dissipation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoSection {
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub x: Vec<u32>,
    pub coeff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSection {
    /// `equality` or `region`.
    pub mode: String,
    pub e_matrix: Option<Vec<Vec<f64>>>,
    pub e_vector: Option<Vec<f64>>,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    #[serde(default)]
    pub penalty: Vec<PenaltySpec>,
    pub policy_gain: Option<Vec<Vec<f64>>>,
    pub policy_offset: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub steps: usize,
    pub x0: Vec<f64>,
    #[serde(default = "yes")]
    pub warm_multipliers: bool,
}

fn yes() -> bool {
    true
}

fn cfg_err(e: impl std::fmt::Display) -> EmpcError {
    EmpcError::Config(e.to_string())
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(cfg_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EmpcError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// SHA-256 of the re-serialized configuration, so formatting and comments do
    /// not change the hash.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).unwrap_or_default();
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build(&self) -> Result<ExperimentConfig> {
        if self.horizon.n < 1 {
            return Err(EmpcError::Config("horizon must be ≥ 1".into()));
        }
        let system = match self.system.model.as_str() {
            "linear" => {
                let (Some(a), Some(b)) = (&self.system.a, &self.system.b) else {
                    return Err(cfg_err("linear system needs `a` and `b`"));
                };
                SystemModel::linear(a.clone(), b.clone()).map_err(cfg_err)?
            }
            name => {
                if self.system.a.is_some() || self.system.b.is_some() {
                    return Err(cfg_err(format!("system `{name}` does not take matrices")));
                }
                SystemModel::named(name)?
            }
        };
        let c = &self.constraints;
        let input = match (&c.input_lo, &c.input_hi, &c.coupled) {
            (Some(lo), Some(hi), None) => InputConstraints::Box { lo: lo.clone(), hi: hi.clone() },
            (None, None, Some(rows)) => InputConstraints::CoupledAffine(rows.clone()),
            _ => return Err(cfg_err("constraints need either input_lo/input_hi or coupled rows")),
        };
        let constraints = ConstraintSet::new(c.state_lo.clone(), c.state_hi.clone(), input).map_err(cfg_err)?;
        if constraints.n() != system.n() || constraints.m() != system.m() {
            return Err(cfg_err("constraint dimensions do not match the system"));
        }

        let cost = match self.cost.kind.as_str() {
            "polynomial" => StageCost::Polynomial(
                self.cost.terms.clone().ok_or_else(|| cfg_err("polynomial cost needs `terms`"))?,
            ),
            name => {
                if self.cost.terms.is_some() {
                    return Err(cfg_err(format!("cost `{name}` does not take terms")));
                }
                StageCost::named(name)?
            }
        };
        cost.check_dims(system.n(), system.m())?;

        let s = &self.storage;
        let basis: Vec<Monomial> = match (s.basis.as_str(), &s.monomials) {
            ("quadratic", None) => StorageFamily::quadratic_basis(),
            ("quartic", None) => StorageFamily::quartic_basis(),
            ("custom", Some(m)) => m.iter().cloned().map(Monomial::new).collect(),
            (other, _) => return Err(cfg_err(format!("unsupported storage basis `{other}` (monomials only with `custom`)"))),
        };
        let p = basis.len();
        let (lo, hi) = match (s.theta_bound, &s.theta_lo, &s.theta_hi) {
            (Some(b), None, None) => (vec![-b; p], vec![b; p]),
            (None, Some(lo), Some(hi)) => (lo.clone(), hi.clone()),
            _ => return Err(cfg_err("storage needs either theta_bound or theta_lo/theta_hi")),
        };
        let pins = s.pinned.iter().map(|p| (p.index, p.value)).collect();
        let storage = StorageFamily::new(basis, lo, hi, pins).map_err(cfg_err)?;
        let theta0 = match &s.theta0 {
            Some(t) => t.clone(),
            None => storage.default_theta(),
        };
        let rho = RhoFunction::new(self.rho.weight).map_err(cfg_err)?;

        let steady = solve_steady_state(&system, &cost, &constraints)?;
        let t = &self.terminal;
        let terminal = match t.mode.as_str() {
            "equality" => {
                if t.e_matrix.is_some() || t.policy_gain.is_some() || !t.penalty.is_empty() {
                    return Err(cfg_err("equality terminal takes no region, penalty or policy"));
                }
                TerminalIngredients::equality(&steady, &constraints.state_lo, &constraints.state_hi)
            }
            "region" => {
                let Some(gain) = t.policy_gain.clone() else {
                    return Err(cfg_err("region terminal needs a policy (policy_gain)"));
                };
                let m = system.m();
                TerminalIngredients::region(
                    t.e_matrix.clone().unwrap_or_default(),
                    t.e_vector.clone().unwrap_or_default(),
                    t.lo.clone().unwrap_or_else(|| constraints.state_lo.clone()),
                    t.hi.clone().unwrap_or_else(|| constraints.state_hi.clone()),
                    t.penalty
                        .iter()
                        .map(|p| PenaltyTerm { monomial: Monomial::new(p.x.clone()), coeff: p.coeff })
                        .collect(),
                    gain,
                    t.policy_offset.clone().unwrap_or_else(|| vec![0.0; m]),
                    &steady,
                    &constraints.state_lo,
                    &constraints.state_hi,
                )?
            }
            other => return Err(cfg_err(format!("unknown terminal mode `{other}`"))),
        };

        let cfg = ExperimentConfig {
            system,
            constraints,
            cost,
            storage,
            rho,
            terminal,
            horizon: self.horizon.n,
            steps: self.sim.steps,
            x0: self.sim.x0.clone(),
            theta0,
            solver: self.solver.clone(),
            warm_multipliers: self.sim.warm_multipliers,
            enforce_dissipation: s.enforce_dissipation,
            steady,
            config_hash: self.hash(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    RawConfig::parse(text)?.build()
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    RawConfig::load(path)?.build()
}
