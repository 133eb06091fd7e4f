//! Treatment-aware re-planning of top-N recommendation lists.
//!
//! The crate treats the category exposure ratios of a recommendation list as a
//! multivariate treatment and the per-category click-through rate as the
//! outcome. From logged feedback it carves (history, treatment, outcome)
//! samples, estimates each user's dose-response matrix with inverse-propensity
//! debiasing, and then either
//!
//! * solves a slot-allocation knapsack over the estimated matrix to pick the
//!   exposure mix that maximizes expected clicks (`adrf` policy), or
//! * nudges the backend ranking with marginal treatment effects (`mtef`
//!   policy).
//!
//! Modules follow the pipeline order: [`data`] ingests logs, [`backend`]
//! trains the matrix-factorization scorer and clusters items, [`causal`]
//! builds augmented samples and estimates propensity / dose-response /
//! marginal effects, [`planner`] turns estimates into lists, [`eval`] scores
//! them against unbiased feedback, [`synth`] generates ground-truth worlds for
//! calibration tests, and [`pipeline`] orchestrates everything from a single
//! config.

pub mod backend;
pub mod causal;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod planner;
pub mod synth;

pub use error::{Error, Result};

/// Original (file-level) user identifier.
pub type UserId = u64;
/// Original (file-level) item identifier.
pub type ItemId = u64;
