//! Per-agent receding-horizon problem: tracking cost, box limits, and
//! separation constraints against fixed counterpart trajectories.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{make_double_integrator, AgentState, Scenario, Trajectory, Vec2};
use crate::nlp::{
    solve_sqp, AvoidanceConstraint, CostWeights, SolveStats, SolverError, SqpOptions,
    StateInputBounds, TrajectoryProblem,
};

/// Tuning of the local problem. Defaults follow the benchmark settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcParams {
    pub horizon: usize,
    pub state_weight: f64,
    pub input_weight: f64,
    pub terminal_weight: f64,
    pub dt: f64,
    /// Per-axis speed limit [m/s].
    pub speed_cap: f64,
    /// Per-axis acceleration limit [m/s^2].
    pub accel_cap: f64,
    #[serde(skip)]
    pub sqp: SqpOptions,
}

impl Default for MpcParams {
    fn default() -> Self {
        Self {
            horizon: 20,
            state_weight: 5.0,
            input_weight: 1.0,
            terminal_weight: 40.0,
            dt: 0.05,
            speed_cap: 1.5,
            accel_cap: 2.0,
            sqp: SqpOptions::default(),
        }
    }
}

impl MpcParams {
    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.state_weight, self.input_weight, self.terminal_weight];
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter("cost weights must be non-negative".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.speed_cap > 0.0 && self.accel_cap > 0.0) {
            return Err(Error::InvalidParameter("speed and acceleration caps must be positive".into()));
        }
        Ok(())
    }

    /// Condensed problem for a scenario's map bounds.
    pub fn build_problem(&self, scenario: &Scenario) -> Result<TrajectoryProblem> {
        self.validate()?;
        let model = make_double_integrator(self.dt)?;
        let weights = CostWeights::uniform(self.state_weight, self.input_weight, self.terminal_weight);
        let bounds = StateInputBounds {
            position: Some(scenario.bounds),
            speed_cap: self.speed_cap,
            accel_cap: self.accel_cap,
        };
        Ok(TrajectoryProblem::new(model, self.horizon, weights, bounds)?)
    }
}

/// Desired states over one horizon, `horizon + 1` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub states: Vec<AgentState>,
}

impl ReferenceTrajectory {
    /// Hold a single state over the horizon.
    pub fn constant(state: AgentState, horizon: usize) -> Self {
        Self {
            states: vec![state; horizon + 1],
        }
    }

    /// Window `[start, start + horizon]` of a time-sampled path, holding the
    /// last sample once the path runs out.
    pub fn window(path: &[AgentState], start: usize, horizon: usize) -> Self {
        assert!(!path.is_empty(), "reference path must not be empty");
        let last = path.len() - 1;
        Self {
            states: (start..=start + horizon).map(|k| path[k.min(last)]).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }
}

/// The other party of a separation constraint. Agents order before
/// obstacles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Counterpart {
    Agent(usize),
    Obstacle(usize),
}

/// Keep `agent` separated from `counterpart` at every horizon step in
/// `start..=end`. Agents are referred to by their index in the scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConstraintRecord {
    pub agent: usize,
    pub counterpart: Counterpart,
    pub start: usize,
    pub end: usize,
}

impl ConstraintRecord {
    pub fn new(agent: usize, counterpart: Counterpart, start: usize, end: usize) -> Self {
        Self {
            agent,
            counterpart,
            start,
            end,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub trajectory: Trajectory,
    pub stats: SolveStats,
    /// Distinct (counterpart, step) separation constraints in the problem.
    pub posed_constraints: usize,
}

/// Local solver bound to one scenario and parameter set. Construction
/// factorises the Hessian once; solves reuse it.
#[derive(Debug, Clone)]
pub struct MpcSolver {
    problem: TrajectoryProblem,
    params: MpcParams,
    separation: f64,
    obstacles: Vec<(Vec2, f64)>,
}

impl MpcSolver {
    pub fn new(scenario: &Scenario, params: &MpcParams) -> Result<Self> {
        Ok(Self {
            problem: params.build_problem(scenario)?,
            params: params.clone(),
            separation: scenario.separation(),
            obstacles: scenario
                .obstacles
                .iter()
                .map(|o| (o.center, scenario.keep_out_radius(o)))
                .collect(),
        })
    }

    pub fn params(&self) -> &MpcParams {
        &self.params
    }

    pub fn problem(&self) -> &TrajectoryProblem {
        &self.problem
    }

    pub fn horizon(&self) -> usize {
        self.problem.horizon()
    }

    /// Obstacle constraints over steps `1..=horizon` for every obstacle.
    pub fn all_obstacle_records(&self, agent: usize) -> Vec<ConstraintRecord> {
        (0..self.obstacles.len())
            .map(|o| ConstraintRecord::new(agent, Counterpart::Obstacle(o), 1, self.horizon()))
            .collect()
    }

    /// Solve for `agent` starting at `initial`. Agent counterparts are read
    /// from `fixed`, indexed by agent.
    pub fn solve(
        &self,
        agent: usize,
        initial: &AgentState,
        reference: &ReferenceTrajectory,
        constraints: &[ConstraintRecord],
        fixed: &[Trajectory],
        seed: &Trajectory,
    ) -> std::result::Result<MpcSolution, SolverError> {
        let started = Instant::now();
        let horizon = self.horizon();
        if reference.states.len() != horizon + 1 || seed.horizon() != horizon {
            return Err(SolverError::InvalidProblem("reference or seed length does not match the horizon".into()));
        }
        let mut keys: Vec<(Counterpart, usize)> = Vec::new();
        for rec in constraints.iter().filter(|r| r.agent == agent) {
            if rec.start > rec.end || rec.end > horizon {
                return Err(SolverError::InvalidProblem(format!("bad constraint range {rec:?}")));
            }
            match rec.counterpart {
                Counterpart::Agent(j) if j == agent || j >= fixed.len() => {
                    return Err(SolverError::InvalidProblem(format!("no trajectory for counterpart {j}")));
                }
                Counterpart::Agent(j) if fixed[j].horizon() != horizon => {
                    return Err(SolverError::InvalidProblem(format!("counterpart {j} has the wrong horizon")));
                }
                Counterpart::Obstacle(o) if o >= self.obstacles.len() => {
                    return Err(SolverError::InvalidProblem(format!("no obstacle {o}")));
                }
                _ => {}
            }
            keys.extend((rec.start..=rec.end).map(|l| (rec.counterpart, l)));
        }
        keys.sort_unstable();
        keys.dedup();

        let avoidance: Vec<AvoidanceConstraint> = keys
            .iter()
            .map(|&(cp, l)| match cp {
                Counterpart::Agent(j) => {
                    let s = &fixed[j].states[l];
                    AvoidanceConstraint::moving(l, s.position, s.velocity, self.separation)
                }
                Counterpart::Obstacle(o) => {
                    let (center, radius) = self.obstacles[o];
                    AvoidanceConstraint::new(l, center, radius)
                }
            })
            .collect();
        let (trajectory, mut stats) =
            solve_sqp(&self.problem, initial, &reference.states, &avoidance, seed, &self.params.sqp)?;
        stats.active_constraints = keys.len();
        stats.wall_time = started.elapsed().as_secs_f64();
        Ok(MpcSolution {
            trajectory,
            stats,
            posed_constraints: keys.len(),
        })
    }
}

/// One-shot solve for an agent of `scenario`, see [`MpcSolver::solve`].
#[allow(clippy::too_many_arguments)]
pub fn solve_mpc(
    agent: usize,
    scenario: &Scenario,
    params: &MpcParams,
    reference: &ReferenceTrajectory,
    constraints: &[ConstraintRecord],
    fixed: &[Trajectory],
    seed: &Trajectory,
) -> Result<MpcSolution> {
    let solver = MpcSolver::new(scenario, params)?;
    let initial = seed.states[0];
    Ok(solver.solve(agent, &initial, reference, constraints, fixed, seed)?)
}

/// Advance a plan by one step: drop the first input, repeat the last one and
/// roll the dynamics forward from the second state.
pub fn shift_warm_start(prev: &Trajectory, model: &crate::model::DynamicsModel) -> Trajectory {
    let n = prev.horizon();
    if n == 0 {
        return prev.clone();
    }
    let mut inputs: Vec<_> = prev.inputs[1..].to_vec();
    inputs.push(prev.inputs[n - 1]);
    Trajectory::rollout(model, prev.states[1], inputs)
}

/// Sum of segment lengths of the position sequence.
pub fn trajectory_length(traj: &Trajectory) -> f64 {
    path_length(traj.states.iter().map(|s| s.position))
}

pub fn path_length(points: impl IntoIterator<Item = Vec2>) -> f64 {
    let mut iter = points.into_iter();
    let Some(mut prev) = iter.next() else {
        return 0.0;
    };
    iter.fold(0.0, |acc, p| {
        let d = (p - prev).norm();
        prev = p;
        acc + d
    })
}
