//! Weakly supervised moment localization: frame-by-word interaction, word-conditioned
//! visual graph refinement, LSE-pooled similarity and a triplet ranking objective.

// Range checks are written as `!(x > 0.0)` so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoders;
pub mod error;
pub mod eval;
pub mod cli;
pub mod data;
pub mod exec;
pub mod fbw;
pub mod harness;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod wcvg;

pub use error::{Error, Result};
pub use exec::Exec;
