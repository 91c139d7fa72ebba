//! Graph-agnostic estimation of the total treatment effect (TTE) under
//! network interference with staggered rollout designs.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: configuration-model interference networks and edge-list IO.
//! - [`outcomes`]: polynomial potential-outcomes models, ground truth and noisy observations.
//! - [`design`]: Bernoulli and completely randomized staggered rollouts.
//! - [`estimators`]: polynomial-interpolation estimators and the regression / difference-in-means baselines.
//! - [`oracle`]: exact enumeration of estimator moments, closed-form bounds and the optimal-weights solve.
//! - [`harness`]: seeded Monte-Carlo experiments with CSV output.
//! - [`cli`]: the `tte` command-line entry point.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod cli;
pub mod design;
pub mod error;
pub mod estimators;
pub mod graph;
pub mod harness;
pub mod oracle;
pub mod outcomes;
pub mod seed;

pub use error::{Error, Result};
