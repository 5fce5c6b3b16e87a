//! Conflict-based model predictive control for multi-robot navigation.

pub mod baselines;
pub mod cbmpc;
pub mod cbs;
pub mod environments;
pub mod error;
pub mod harness;
pub mod model;
pub mod mpc;
pub mod nlp;

pub use error::{Error, Result};
