//! Linear-programming approach to discounted linear-quadratic control from
//! data: Bellman-inequality synthesis, stage-cost reconstruction, a dense LP
//! solver and Riccati-referenced experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.

pub mod cli;
pub mod config;
pub mod constraints;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod lpsolve;
pub mod lqsystem;
pub mod stagecost;

pub use error::{Error, Result};
