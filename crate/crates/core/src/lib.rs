//! Alternating stochastic gradient methods for nested optimization.
//!
//! The crate is organised around [`problem_model::BilevelProblem`], an
//! operator-only oracle bundle. Optimizers in [`alset`] consume it, the
//! [`synthetic`] module builds closed-form instances, and [`diagnostics`]
//! turns trajectories into rate fits and certificates. The tabular
//! actor-critic lives in [`actor_critic`] and has its own oracles.

// `!(x > 0.0)` is the NaN-rejecting form of the checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actor_critic;
pub mod alset;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod problem_model;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
