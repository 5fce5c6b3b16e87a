//! Conflict-based MPC: best-first search over a tree of per-agent MPC
//! solutions. Each node holds a constraint set and one trajectory per agent;
//! the first conflict of a node is resolved by re-solving a single agent
//! against the others' trajectories held fixed.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Result;
use crate::model::{AgentState, ControlInput, Scenario, Trajectory, Vec2};
use crate::mpc::{
    trajectory_length, ConstraintRecord, Counterpart, MpcParams, MpcSolver, ReferenceTrajectory,
};
use crate::nlp::SolverError;

/// Distances this far below a threshold still count as satisfying it.
pub const CONFLICT_TOLERANCE: f64 = 1e-6;

/// Separation violated by `agent` against `counterpart`, first at horizon
/// step `start`. For agent pairs `agent` is the lower index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub agent: usize,
    pub counterpart: Counterpart,
    pub start: usize,
    pub end: usize,
}

impl Conflict {
    fn key(&self) -> (usize, usize, Counterpart) {
        (self.start, self.agent, self.counterpart)
    }
}

/// All conflicts in a joint solution, at most one per agent pair and per
/// agent-obstacle pair, ordered by first violating step, then agent, then
/// counterpart.
pub fn detect_conflicts(solution: &[Trajectory], scenario: &Scenario) -> Vec<Conflict> {
    detect_conflicts_with(solution, scenario, true)
}

/// As [`detect_conflicts`], optionally skipping obstacles.
pub fn detect_conflicts_with(
    solution: &[Trajectory],
    scenario: &Scenario,
    include_obstacles: bool,
) -> Vec<Conflict> {
    let Some(first) = solution.first() else {
        return Vec::new();
    };
    let horizon = first.horizon();
    let separation = scenario.separation() - CONFLICT_TOLERANCE;
    let first_violation = |dist: &dyn Fn(usize) -> f64, limit: f64| (0..=horizon).find(|&l| dist(l) < limit);

    let mut out = Vec::new();
    for i in 0..solution.len() {
        for j in i + 1..solution.len() {
            let dist = |l: usize| (solution[i].position(l) - solution[j].position(l)).norm();
            if let Some(start) = first_violation(&dist, separation) {
                out.push(Conflict {
                    agent: i,
                    counterpart: Counterpart::Agent(j),
                    start,
                    end: horizon,
                });
            }
        }
        if include_obstacles {
            for (o, obs) in scenario.obstacles.iter().enumerate() {
                let limit = scenario.keep_out_radius(obs) - CONFLICT_TOLERANCE;
                let dist = |l: usize| (solution[i].position(l) - obs.center).norm();
                if let Some(start) = first_violation(&dist, limit) {
                    out.push(Conflict {
                        agent: i,
                        counterpart: Counterpart::Obstacle(o),
                        start,
                        end: horizon,
                    });
                }
            }
        }
    }
    out.sort_by_key(Conflict::key);
    out
}

/// Sum of individual costs: travelled length plus remaining distance to goal.
pub fn sic(solution: &[Trajectory], goals: &[Vec2]) -> f64 {
    assert_eq!(solution.len(), goals.len(), "one goal per agent");
    solution
        .iter()
        .zip(goals)
        .map(|(t, g)| trajectory_length(t) + (t.terminal().position - g).norm())
        .sum()
}

/// Number of distinct (counterpart, step) constraints imposed on `agent`.
pub fn posed_constraint_count(constraints: &[ConstraintRecord], agent: usize) -> usize {
    let mut keys: Vec<(Counterpart, usize)> = constraints
        .iter()
        .filter(|r| r.agent == agent)
        .flat_map(|r| (r.start..=r.end).map(move |l| (r.counterpart, l)))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Inputs for one control step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub step: usize,
    pub states: &'a [AgentState],
    pub references: &'a [ReferenceTrajectory],
    /// Previous plans shifted by one step; also the predictions agents share.
    pub warm_starts: &'a [Trajectory],
}

/// How per-unit solve times combine into a per-step time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    PerRobot,
    Summed,
}

/// Output of one planning step.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanStepResult {
    /// First input of every agent's plan.
    pub inputs: Vec<ControlInput>,
    pub trajectories: Vec<Trajectory>,
    /// Posed separation constraints per solve unit of the final solution.
    pub constraints_posed: Vec<usize>,
    /// Wall time per solve unit [s].
    pub solve_times: Vec<f64>,
    pub expansions: usize,
}

impl PlanStepResult {
    fn from_trajectories(
        trajectories: Vec<Trajectory>,
        constraints_posed: Vec<usize>,
        solve_times: Vec<f64>,
        expansions: usize,
    ) -> Self {
        Self {
            inputs: trajectories.iter().map(|t| t.inputs[0]).collect(),
            trajectories,
            constraints_posed,
            solve_times,
            expansions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("local problem of agent {agent} failed: {source}")]
    Solver { agent: usize, source: SolverError },
    #[error("conflict tree exhausted without a conflict-free node")]
    Exhausted,
    #[error("conflict tree expansion limit of {0} reached")]
    ExpansionLimit(usize),
}

/// A multi-agent planner driven by the episode runner.
pub trait Planner: Send {
    fn name(&self) -> &'static str;

    fn timing_mode(&self) -> TimingMode {
        TimingMode::PerRobot
    }

    fn plan_step(&mut self, ctx: &StepContext<'_>) -> std::result::Result<PlanStepResult, PlanError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbMpcOptions {
    pub max_expansions: usize,
    /// Solve the children of an expansion concurrently.
    pub parallel: bool,
}

impl Default for CbMpcOptions {
    fn default() -> Self {
        Self {
            max_expansions: 100,
            parallel: false,
        }
    }
}

/// Conflict-tree node.
#[derive(Debug, Clone, PartialEq)]
pub struct CtNode {
    pub constraints: Vec<ConstraintRecord>,
    pub solution: Vec<Trajectory>,
    pub cost: f64,
    pub creation: usize,
}

impl Eq for CtNode {}

impl Ord for CtNode {
    // reversed: BinaryHeap pops the cheapest, oldest node first
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.creation.cmp(&self.creation))
    }
}

impl PartialOrd for CtNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub struct CbMpcPlanner {
    scenario: Scenario,
    solver: MpcSolver,
    goals: Vec<Vec2>,
    options: CbMpcOptions,
    popped: Vec<f64>,
}

impl CbMpcPlanner {
    pub fn new(scenario: &Scenario, params: &MpcParams, options: CbMpcOptions) -> Result<Self> {
        Ok(Self {
            scenario: scenario.clone(),
            solver: MpcSolver::new(scenario, params)?,
            goals: scenario.goals(),
            options,
            popped: Vec::new(),
        })
    }

    /// Costs of the nodes popped during the last step, in pop order.
    pub fn popped_costs(&self) -> &[f64] {
        &self.popped
    }

    fn node(&self, constraints: Vec<ConstraintRecord>, solution: Vec<Trajectory>, creation: usize) -> CtNode {
        CtNode {
            cost: sic(&solution, &self.goals),
            constraints,
            solution,
            creation,
        }
    }
}

impl Planner for CbMpcPlanner {
    fn name(&self) -> &'static str {
        "cbmpc"
    }

    fn plan_step(&mut self, ctx: &StepContext<'_>) -> std::result::Result<PlanStepResult, PlanError> {
        let n_agents = ctx.states.len();
        let horizon = self.solver.horizon();
        let mut times = vec![0.0; n_agents];
        self.popped.clear();

        let mut root = Vec::with_capacity(n_agents);
        for (a, time) in times.iter_mut().enumerate() {
            let sol = self
                .solver
                .solve(a, &ctx.states[a], &ctx.references[a], &[], ctx.warm_starts, &ctx.warm_starts[a])
                .map_err(|source| PlanError::Solver { agent: a, source })?;
            *time += sol.stats.wall_time;
            root.push(sol.trajectory);
        }
        let mut created = 0;
        let mut open = BinaryHeap::new();
        open.push(self.node(Vec::new(), root, created));

        let mut expansions = 0;
        while let Some(node) = open.pop() {
            self.popped.push(node.cost);
            let conflicts = detect_conflicts(&node.solution, &self.scenario);
            let Some(conflict) = conflicts.first().copied() else {
                let posed = (0..n_agents).map(|a| posed_constraint_count(&node.constraints, a)).collect();
                return Ok(PlanStepResult::from_trajectories(node.solution, posed, times, expansions));
            };
            if expansions >= self.options.max_expansions {
                return Err(PlanError::ExpansionLimit(self.options.max_expansions));
            }
            expansions += 1;

            let mut branches = vec![ConstraintRecord::new(conflict.agent, conflict.counterpart, conflict.start, horizon)];
            if let Counterpart::Agent(other) = conflict.counterpart {
                branches.push(ConstraintRecord::new(
                    other,
                    Counterpart::Agent(conflict.agent),
                    conflict.start,
                    horizon,
                ));
            }
            let solve_child = |record: &ConstraintRecord| {
                let mut constraints = node.constraints.clone();
                if !constraints.contains(record) {
                    constraints.push(*record);
                }
                let a = record.agent;
                let result = self.solver.solve(
                    a,
                    &ctx.states[a],
                    &ctx.references[a],
                    &constraints,
                    &node.solution,
                    &node.solution[a],
                );
                (constraints, result)
            };
            let children: Vec<_> = if self.options.parallel {
                branches.par_iter().map(solve_child).collect()
            } else {
                branches.iter().map(solve_child).collect()
            };
            for (record, (constraints, result)) in branches.iter().zip(children) {
                match result {
                    Ok(sol) => {
                        times[record.agent] += sol.stats.wall_time;
                        let mut solution = node.solution.clone();
                        solution[record.agent] = sol.trajectory;
                        created += 1;
                        open.push(self.node(constraints, solution, created));
                    }
                    Err(SolverError::Infeasible | SolverError::MaxIterations) => {}
                    Err(source) => return Err(PlanError::Solver { agent: record.agent, source }),
                }
            }
        }
        Err(PlanError::Exhausted)
    }
}
