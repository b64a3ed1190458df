//! Penalized locally efficient estimating equations for regression models
//! with a covariate measured with additive normal error.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluation;
pub mod model;
pub mod penalty;
pub mod problem;
pub mod quadrature;
pub mod score;
pub mod semipar;
pub mod sim;
pub mod solver;
pub mod study;
pub mod tuning;

pub use error::{Error, Result};
pub use model::{Dataset, Design, Family, MeModel, NormalError, Obs, Posited, PositedRule, QuadratureSettings};
pub use penalty::{PenaltyFamily, PenaltySpec};
pub use score::ScoreEngine;
pub use solver::{FitResult, SolverConfig};
