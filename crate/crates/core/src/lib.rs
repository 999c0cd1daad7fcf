//! Economic model predictive control with controlled-dissipativity constraints
//! and parameter-varying storage functions.
//!
//! The crate is organised bottom-up: [`model`] (plant, constraints, costs, steady
//! state), [`storage`] (storage families and the dissipation residual), [`nlp`]
//! (augmented-Lagrangian solver), [`ocp`] (the per-step problem and warm starts),
//! [`simulate`] (closed loop) and [`diagnostics`] (runtime checks of the
//! stability and performance guarantees).

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod monomial;
pub mod nlp;
pub mod ocp;
pub mod simulate;
pub mod storage;

pub use config::{load_config, parse_config, RawConfig};
pub use diagnostics::{diagnose, DiagnosticsOptions, DiagnosticsReport};
pub use error::{EmpcError, Result};
pub use model::{
    constraint_residuals, orbit_average_cost, solve_steady_state, ConstraintSet, InputConstraints, StageCost,
    SteadyState, SystemModel,
};
pub use monomial::Monomial;
pub use nlp::{NlpProblem, NlpSolution, SolveStatus, SolverOptions};
pub use ocp::{
    build_ocp, shift_warm_start, validate_candidate, ExperimentConfig, OcpSolutionTriple, TerminalIngredients,
    TerminalMode,
};
pub use simulate::{convergence_time, run_closed_loop, transient_average, ClosedLoopLog};
pub use storage::{dissipation_residual, storage_eval, RhoFunction, StorageFamily};
