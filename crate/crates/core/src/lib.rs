//! Continual learning with energy-weighted low-rank adapter regularization.
//!
//! Each task trains a fresh low-rank adapter pair per layer while the sum of
//! all earlier adapter updates (`W_past`) penalizes alignment through
//! `‖ΔW ⊙ W_past‖_F²`. The crate also carries the closed-form shrinkage
//! analysis of that penalty, a synthetic task-stream generator, and a
//! harness that computes the usual continual-learning metrics.

// Argument checks are written as `!(x > 0.0)` on purpose: NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod parallel;
pub mod regularizer;
pub mod report;
pub mod stream;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{LowRankFactors, Matrix};
pub use parallel::Execution;
