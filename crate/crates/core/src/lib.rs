//! Exit rates of small-noise linear feedback systems from a bounded domain:
//! grid eigenvalues, Monte Carlo exit times, controlled eigenproblems,
//! large-deviation actions and Pareto comparison of feedback candidates.

// NaN-rejecting guards are written as `!(x > 0.0)`, and stencil loops index
// several arrays by node.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod action;
pub mod config;
pub mod drift;
pub mod eig;
pub mod error;
pub mod flow;
pub mod hjb;
pub mod model;
pub mod pareto;
pub mod run;
pub mod sde;
pub mod verify;

pub use error::{Error, Result};
