//! Trajectory optimisation: a dense QP solver and an SQP loop for
//! quadratic tracking costs with linear dynamics, box bounds and keep-out
//! discs.

mod prediction;
pub mod qp;
pub mod sqp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Vec2;

pub use prediction::{CostWeights, Prediction, StateInputBounds, TrajectoryProblem};
pub use qp::{solve_qp, solve_qp_with, HessianFactor, QpOptions, QpProblem, QpSolution};
pub use sqp::{
    linearization_normal, solve_sqp, solve_sqp_joint, JointAgent, PairConstraint, SqpOptions,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SolverError {
    #[error("problem is infeasible")]
    Infeasible,
    #[error("iteration limit exceeded")]
    MaxIterations,
    #[error("hessian is not positive semidefinite")]
    NotConvex,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveStats {
    /// Objective value `J` at the returned point.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub active_constraints: usize,
    /// Wall time in seconds.
    pub wall_time: f64,
    pub kkt_residual: f64,
}

/// Keep the agent's position at horizon step `step` at least `radius` away
/// from `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvoidanceConstraint {
    pub step: usize,
    pub center: Vec2,
    pub radius: f64,
    /// Velocity of the centre, zero for static obstacles. Only used to pick
    /// a linearisation direction when the iterate is inside the disc.
    pub center_velocity: Vec2,
}

impl AvoidanceConstraint {
    pub fn new(step: usize, center: Vec2, radius: f64) -> Self {
        Self {
            step,
            center,
            radius,
            center_velocity: Vec2::zeros(),
        }
    }

    pub fn moving(step: usize, center: Vec2, center_velocity: Vec2, radius: f64) -> Self {
        Self {
            step,
            center,
            radius,
            center_velocity,
        }
    }
}
