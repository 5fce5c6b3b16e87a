//! Comparison planners: joint, prioritized, distributed and vanilla MPC.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cbmpc::{
    detect_conflicts_with, PlanError, CONFLICT_TOLERANCE, PlanStepResult, Planner, StepContext,
    TimingMode,
};
use crate::error::{Error, Result};
use crate::model::{Scenario, Trajectory};
use crate::mpc::{ConstraintRecord, Counterpart, MpcParams, MpcSolution, MpcSolver};
use crate::nlp::{solve_sqp_joint, AvoidanceConstraint, JointAgent, PairConstraint};

fn solve_all(
    solver: &MpcSolver,
    ctx: &StepContext<'_>,
    constraints: &[Vec<ConstraintRecord>],
    fixed: &[Trajectory],
    parallel: bool,
) -> std::result::Result<Vec<MpcSolution>, PlanError> {
    let solve = |a: usize| {
        solver
            .solve(a, &ctx.states[a], &ctx.references[a], &constraints[a], fixed, &ctx.warm_starts[a])
            .map_err(|source| PlanError::Solver { agent: a, source })
    };
    let n = ctx.states.len();
    if parallel {
        (0..n).into_par_iter().map(solve).collect()
    } else {
        (0..n).map(solve).collect()
    }
}

fn finish(solutions: Vec<MpcSolution>, expansions: usize) -> PlanStepResult {
    let posed = solutions.iter().map(|s| s.posed_constraints).collect();
    let times = solutions.iter().map(|s| s.stats.wall_time).collect();
    let trajectories: Vec<Trajectory> = solutions.into_iter().map(|s| s.trajectory).collect();
    PlanStepResult {
        inputs: trajectories.iter().map(|t| t.inputs[0]).collect(),
        trajectories,
        constraints_posed: posed,
        solve_times: times,
        expansions,
    }
}

/// One problem over the stacked inputs of all agents with every pairwise
/// and obstacle constraint at every step `1..=N`.
pub struct JointPlanner {
    scenario: Scenario,
    solver: MpcSolver,
}

impl JointPlanner {
    pub fn new(scenario: &Scenario, params: &MpcParams) -> Result<Self> {
        Ok(Self {
            scenario: scenario.clone(),
            solver: MpcSolver::new(scenario, params)?,
        })
    }
}

/// Posed constraints of the joint problem: `N * (pairs + agents * obstacles)`.
pub fn joint_constraint_count(agents: usize, obstacles: usize, horizon: usize) -> usize {
    horizon * (agents * agents.saturating_sub(1) / 2 + agents * obstacles)
}

impl Planner for JointPlanner {
    fn name(&self) -> &'static str {
        "joint"
    }

    fn timing_mode(&self) -> TimingMode {
        TimingMode::Summed
    }

    fn plan_step(&mut self, ctx: &StepContext<'_>) -> std::result::Result<PlanStepResult, PlanError> {
        let n_agents = ctx.states.len();
        let horizon = self.solver.horizon();
        let avoidance: Vec<Vec<AvoidanceConstraint>> = (0..n_agents)
            .map(|_| {
                self.scenario
                    .obstacles
                    .iter()
                    .flat_map(|o| {
                        let r = self.scenario.keep_out_radius(o);
                        (1..=horizon).map(move |l| AvoidanceConstraint::new(l, o.center, r))
                    })
                    .collect()
            })
            .collect();
        let agents: Vec<JointAgent<'_>> = (0..n_agents)
            .map(|a| JointAgent {
                initial: ctx.states[a],
                reference: &ctx.references[a].states,
                seed: &ctx.warm_starts[a],
                avoidance: &avoidance[a],
            })
            .collect();
        let separation = self.scenario.separation();
        let mut pairs = Vec::new();
        for i in 0..n_agents {
            for j in i + 1..n_agents {
                pairs.extend((1..=horizon).map(|step| PairConstraint {
                    first: i,
                    second: j,
                    step,
                    radius: separation,
                }));
            }
        }
        let (trajectories, stats) =
            solve_sqp_joint(self.solver.problem(), &agents, &pairs, &self.solver.params().sqp)
                .map_err(|source| PlanError::Solver { agent: 0, source })?;
        let posed = joint_constraint_count(n_agents, self.scenario.obstacles.len(), horizon);
        Ok(PlanStepResult {
            inputs: trajectories.iter().map(|t| t.inputs[0]).collect(),
            trajectories,
            constraints_posed: vec![posed],
            solve_times: vec![stats.wall_time],
            expansions: 0,
        })
    }
}

/// Fixed solve order, drawn once from a seeded shuffle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorityAssignment {
    /// Agent indices from highest to lowest priority.
    pub order: Vec<usize>,
    pub seed: u64,
}

impl PriorityAssignment {
    pub fn random(agents: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..agents).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { order, seed }
    }

    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted.iter().enumerate().any(|(i, &a)| i != a) {
            return Err(Error::InvalidParameter(format!("{order:?} is not a permutation")));
        }
        Ok(Self { order, seed: 0 })
    }
}

/// Agents solve in priority order; each avoids the plans just computed by
/// all higher-priority agents over the whole horizon, and every obstacle.
pub struct PrioritizedPlanner {
    solver: MpcSolver,
    priorities: PriorityAssignment,
}

impl PrioritizedPlanner {
    pub fn new(scenario: &Scenario, params: &MpcParams, priorities: PriorityAssignment) -> Result<Self> {
        if priorities.order.len() != scenario.num_agents() {
            return Err(Error::InvalidParameter("priority order must cover every agent".into()));
        }
        Ok(Self {
            solver: MpcSolver::new(scenario, params)?,
            priorities,
        })
    }

    pub fn priorities(&self) -> &PriorityAssignment {
        &self.priorities
    }
}

impl Planner for PrioritizedPlanner {
    fn name(&self) -> &'static str {
        "prioritized"
    }

    fn plan_step(&mut self, ctx: &StepContext<'_>) -> std::result::Result<PlanStepResult, PlanError> {
        let horizon = self.solver.horizon();
        let mut fixed: Vec<Trajectory> = ctx.warm_starts.to_vec();
        let mut solutions: Vec<Option<MpcSolution>> = vec![None; ctx.states.len()];
        for (rank, &a) in self.priorities.order.iter().enumerate() {
            let mut constraints = self.solver.all_obstacle_records(a);
            constraints.extend(
                self.priorities.order[..rank]
                    .iter()
                    .map(|&h| ConstraintRecord::new(a, Counterpart::Agent(h), 1, horizon)),
            );
            let sol = self
                .solver
                .solve(a, &ctx.states[a], &ctx.references[a], &constraints, &fixed, &ctx.warm_starts[a])
                .map_err(|source| PlanError::Solver { agent: a, source })?;
            fixed[a] = sol.trajectory.clone();
            solutions[a] = Some(sol);
        }
        Ok(finish(solutions.into_iter().map(|s| s.expect("every agent solved")).collect(), 0))
    }
}

/// Agents plan independently against the predictions shared at the previous
/// step. Predicted conflicts are resolved by both agents, each adding a
/// constraint over `[t_c, N]`, and the round repeats up to `max_rounds`.
pub struct DistributedPlanner {
    scenario: Scenario,
    solver: MpcSolver,
    max_rounds: usize,
    parallel: bool,
}

impl DistributedPlanner {
    pub fn new(scenario: &Scenario, params: &MpcParams) -> Result<Self> {
        Ok(Self {
            scenario: scenario.clone(),
            solver: MpcSolver::new(scenario, params)?,
            max_rounds: 10,
            parallel: false,
        })
    }

    pub fn with_max_rounds(mut self, rounds: usize) -> Self {
        self.max_rounds = rounds.max(1);
        self
    }

    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }
}

impl Planner for DistributedPlanner {
    fn name(&self) -> &'static str {
        "distributed"
    }

    fn plan_step(&mut self, ctx: &StepContext<'_>) -> std::result::Result<PlanStepResult, PlanError> {
        let n_agents = ctx.states.len();
        let horizon = self.solver.horizon();
        let shared = ctx.warm_starts;
        let mut constraints: Vec<Vec<ConstraintRecord>> =
            (0..n_agents).map(|a| self.solver.all_obstacle_records(a)).collect();
        let mut pending: Vec<ConstraintRecord> = Vec::new();
        for c in detect_conflicts_with(shared, &self.scenario, false) {
            let Counterpart::Agent(other) = c.counterpart else { continue };
            pending.push(ConstraintRecord::new(c.agent, Counterpart::Agent(other), c.start, horizon));
            pending.push(ConstraintRecord::new(other, Counterpart::Agent(c.agent), c.start, horizon));
        }
        let mut times = vec![0.0; n_agents];
        let mut rounds = 0;
        loop {
            for rec in pending.drain(..) {
                if !constraints[rec.agent].contains(&rec) {
                    constraints[rec.agent].push(rec);
                }
            }
            let solutions = solve_all(&self.solver, ctx, &constraints, shared, self.parallel)?;
            rounds += 1;
            for (t, s) in times.iter_mut().zip(&solutions) {
                *t += s.stats.wall_time;
            }
            if rounds < self.max_rounds {
                pending = prediction_conflicts(&solutions, shared, &self.scenario)
                    .into_iter()
                    .map(|(a, b, start)| ConstraintRecord::new(a, Counterpart::Agent(b), start, horizon))
                    .filter(|rec| !constraints[rec.agent].contains(rec))
                    .collect();
            }
            if pending.is_empty() {
                let mut result = finish(solutions, rounds - 1);
                result.solve_times = times;
                return Ok(result);
            }
        }
    }
}

/// First step at which each agent's new plan comes closer than the safety
/// separation to another agent's shared prediction.
fn prediction_conflicts(
    solutions: &[MpcSolution],
    shared: &[Trajectory],
    scenario: &Scenario,
) -> Vec<(usize, usize, usize)> {
    let separation = scenario.separation() - CONFLICT_TOLERANCE;
    let mut out = Vec::new();
    for (a, sol) in solutions.iter().enumerate() {
        let own = &sol.trajectory;
        for (b, other) in shared.iter().enumerate() {
            if a == b {
                continue;
            }
            let hit = (1..=own.horizon()).find(|&l| (own.position(l) - other.position(l)).norm() < separation);
            if let Some(start) = hit {
                out.push((a, b, start));
            }
        }
    }
    out
}

/// Independent per-agent solves with obstacle constraints only.
pub struct VanillaPlanner {
    solver: MpcSolver,
}

impl VanillaPlanner {
    pub fn new(scenario: &Scenario, params: &MpcParams) -> Result<Self> {
        Ok(Self {
            solver: MpcSolver::new(scenario, params)?,
        })
    }
}

impl Planner for VanillaPlanner {
    fn name(&self) -> &'static str {
        "vanilla"
    }

    fn plan_step(&mut self, ctx: &StepContext<'_>) -> std::result::Result<PlanStepResult, PlanError> {
        let constraints: Vec<Vec<ConstraintRecord>> =
            (0..ctx.states.len()).map(|a| self.solver.all_obstacle_records(a)).collect();
        Ok(finish(solve_all(&self.solver, ctx, &constraints, ctx.warm_starts, false)?, 0))
    }
}
