//! Finite-volume simulator for a Keller-Segel system with a reacting second
//! species, coupled to Stokes flow in a box, together with the invariant
//! checks and reference solutions used to validate it.
// Negated comparisons below are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod diagnostics;
pub mod domain;
pub mod error;
pub mod fluid;
pub mod model;
pub mod operators;
pub mod oracle;
pub mod scenario;
pub mod solver;
pub mod timestepper;

pub use diagnostics::{
    check_invariants, equilibrium, fit_rate, monotone_after, record, DiagnosticsRecord,
    EquilibriumSpec, GWeights, InvariantBudget, InvariantReport, RateFit,
};
pub use domain::{integrate, lp_norm, mean, BoundaryCondition, Grid, ScalarField, VectorField};
pub use error::{Error, Result};
pub use fluid::{leray_project, stokes_step, StokesParams};
pub use model::{ModelParams, SensitivityTensor, SimState};
pub use operators::StencilSpec;
pub use scenario::{parse_config, parse_config_with, preset_config, run, run_with, Preset, RunOptions, RunSummary, ScenarioConfig};
pub use timestepper::{step, StepControl};
