//! Receding-horizon episode execution, auditing, metrics and batches.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    DistributedPlanner, JointPlanner, PrioritizedPlanner, PriorityAssignment, VanillaPlanner,
};
use crate::cbmpc::{CbMpcOptions, CbMpcPlanner, Planner, StepContext, TimingMode};
use crate::cbs::plan_scenario;
use crate::environments::{EnvironmentKind, EnvironmentSpec, NarrowGeometry};
use crate::error::{Error, Result};
use crate::model::{make_double_integrator, AgentState, ControlInput, Scenario, Trajectory};
use crate::mpc::{trajectory_length, MpcParams, ReferenceTrajectory};

/// Tolerance of the executed-state collision audit.
pub const AUDIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Hold the goal state over the horizon.
    #[serde(alias = "none")]
    Goal,
    /// Track a time-parameterized grid CBS plan.
    Cbs,
}

impl std::str::FromStr for ReferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "goal" | "none" => Ok(Self::Goal),
            "cbs" => Ok(Self::Cbs),
            other => Err(Error::Parse(format!("unknown reference mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for ReferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Goal => "goal",
            Self::Cbs => "cbs",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub step_limit: usize,
    pub deadlock_window: usize,
    pub deadlock_progress: f64,
    pub deadlock_speed: f64,
    pub reference: ReferenceMode,
    pub cbs_cell_size: f64,
    /// Nominal speed along the CBS reference [m/s].
    pub cbs_speed: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            step_limit: 2000,
            deadlock_window: 20,
            deadlock_progress: 0.1,
            deadlock_speed: 0.1,
            reference: ReferenceMode::Goal,
            cbs_cell_size: 0.25,
            cbs_speed: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Collision,
    Infeasible,
    Deadlock,
    Timeout,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Success => "success",
            Self::Collision => "collision",
            Self::Infeasible => "infeasible",
            Self::Deadlock => "deadlock",
            Self::Timeout => "timeout",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub planner: String,
    pub outcome: Outcome,
    /// Executed states per agent, one more than the number of steps.
    pub states: Vec<Vec<AgentState>>,
    /// Applied inputs per agent.
    pub inputs: Vec<Vec<ControlInput>>,
    /// Wall time per step and solve unit [s].
    pub solve_times: Vec<Vec<f64>>,
    /// Posed separation constraints per step and solve unit.
    pub constraints_posed: Vec<Vec<usize>>,
    pub makespan: f64,
    pub message: Option<String>,
}

impl EpisodeResult {
    pub fn steps(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    pub fn executed(&self, agent: usize) -> Trajectory {
        Trajectory {
            states: self.states[agent].clone(),
            inputs: self.inputs[agent].clone(),
        }
    }

    /// Smallest pairwise centre distance over all executed steps.
    pub fn min_separation(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.states.len() {
            for j in i + 1..self.states.len() {
                for (a, b) in self.states[i].iter().zip(&self.states[j]) {
                    min = min.min((a.position - b.position).norm());
                }
            }
        }
        min
    }

    /// Smallest executed distance to any obstacle centre minus its radius.
    pub fn min_obstacle_clearance(&self, scenario: &Scenario) -> f64 {
        let mut min = f64::INFINITY;
        for history in &self.states {
            for s in history {
                for o in &scenario.obstacles {
                    min = min.min((s.position - o.center).norm() - o.radius());
                }
            }
        }
        min
    }
}

/// Whether any agent has stalled: over the last `window` executed steps its
/// goal distance shrank by less than `progress` and its mean speed stayed
/// below `speed`, while it is still outside the goal tolerance.
pub fn check_deadlock(
    histories: &[Vec<AgentState>],
    scenario: &Scenario,
    window: usize,
    progress: f64,
    speed: f64,
) -> bool {
    histories.iter().zip(&scenario.agents).any(|(h, spec)| {
        if h.len() <= window {
            return false;
        }
        let goal = spec.goal.position;
        let now = h[h.len() - 1];
        let then = h[h.len() - 1 - window];
        if (now.position - goal).norm() <= scenario.eps_g {
            return false;
        }
        let reduction = (then.position - goal).norm() - (now.position - goal).norm();
        let mean_speed =
            h[h.len() - window..].iter().map(|s| s.velocity.norm()).sum::<f64>() / window as f64;
        reduction < progress && mean_speed < speed
    })
}

fn audit(states: &[AgentState], scenario: &Scenario) -> bool {
    let sep = scenario.separation() - AUDIT_TOLERANCE;
    let pairs_ok = (0..states.len())
        .all(|i| (i + 1..states.len()).all(|j| (states[i].position - states[j].position).norm() >= sep));
    pairs_ok
        && states.iter().all(|s| {
            scenario
                .obstacles
                .iter()
                .all(|o| (s.position - o.center).norm() >= scenario.keep_out_radius(o) - AUDIT_TOLERANCE)
        })
}

fn all_arrived(states: &[AgentState], scenario: &Scenario) -> bool {
    states.iter().enumerate().all(|(a, s)| scenario.reached_goal(a, s))
}

/// Run `planner` in closed loop until success or a failure outcome.
pub fn run_episode(
    scenario: &Scenario,
    planner: &mut dyn Planner,
    params: &MpcParams,
    config: &HarnessConfig,
) -> Result<EpisodeResult> {
    params.validate()?;
    let model = make_double_integrator(params.dt)?;
    let n = scenario.num_agents();
    let horizon = params.horizon;

    let dense = match config.reference {
        ReferenceMode::Goal => None,
        ReferenceMode::Cbs => Some(
            plan_scenario(scenario, config.cbs_cell_size)
                .map_err(|e| Error::InvalidParameter(format!("reference planner: {e}")))?
                .dense_paths(config.cbs_speed, params.dt),
        ),
    };

    let mut current = scenario.starts();
    let mut warm: Vec<Trajectory> =
        current.iter().map(|s| Trajectory::coasting(&model, *s, horizon)).collect();
    let mut result = EpisodeResult {
        planner: planner.name().to_string(),
        outcome: Outcome::Timeout,
        states: current.iter().map(|s| vec![*s]).collect(),
        inputs: vec![Vec::new(); n],
        solve_times: Vec::new(),
        constraints_posed: Vec::new(),
        makespan: 0.0,
        message: None,
    };

    let outcome = 'episode: {
        for step in 0..config.step_limit {
            if all_arrived(&current, scenario) {
                break 'episode Outcome::Success;
            }
            let references: Vec<ReferenceTrajectory> = match &dense {
                Some(paths) => paths.iter().map(|p| ReferenceTrajectory::window(p, step, horizon)).collect(),
                None => scenario
                    .agents
                    .iter()
                    .map(|a| ReferenceTrajectory::constant(a.goal, horizon))
                    .collect(),
            };
            let ctx = StepContext {
                step,
                states: &current,
                references: &references,
                warm_starts: &warm,
            };
            let plan = match planner.plan_step(&ctx) {
                Ok(p) => p,
                Err(e) => {
                    result.message = Some(e.to_string());
                    break 'episode Outcome::Infeasible;
                }
            };
            result.solve_times.push(plan.solve_times);
            result.constraints_posed.push(plan.constraints_posed);
            for a in 0..n {
                let next = model.propagate(&current[a], &plan.inputs[a]);
                current[a] = next;
                result.states[a].push(next);
                result.inputs[a].push(plan.inputs[a]);
                let mut inputs = plan.trajectories[a].inputs[1..].to_vec();
                inputs.push(*plan.trajectories[a].inputs.last().expect("non-empty plan"));
                warm[a] = Trajectory::rollout(&model, next, inputs);
            }
            if !audit(&current, scenario) {
                break 'episode Outcome::Collision;
            }
            if check_deadlock(
                &result.states,
                scenario,
                config.deadlock_window,
                config.deadlock_progress,
                config.deadlock_speed,
            ) && !all_arrived(&current, scenario)
            {
                break 'episode Outcome::Deadlock;
            }
        }
        if all_arrived(&current, scenario) {
            Outcome::Success
        } else {
            Outcome::Timeout
        }
    };
    result.outcome = outcome;
    result.makespan = (0..n).map(|a| trajectory_length(&result.executed(a))).sum();
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean makespan of successful episodes [m].
    pub makespan: Option<f64>,
    pub t_avg: Option<f64>,
    pub t_max: Option<f64>,
    pub c_avg: Option<f64>,
}

impl Metrics {
    pub fn success(&self) -> bool {
        self.episodes > 0 && self.successes == self.episodes
    }
}

/// Aggregate metrics over the successful episodes. Per-robot timing treats
/// each solve unit at each step as a sample; summed timing adds the units
/// of a step first.
pub fn compute_metrics(episodes: &[EpisodeResult], mode: TimingMode) -> Metrics {
    let ok: Vec<&EpisodeResult> = episodes.iter().filter(|e| e.is_success()).collect();
    let mut times = Vec::new();
    let mut constraints = Vec::new();
    for e in &ok {
        for step in &e.solve_times {
            match mode {
                TimingMode::PerRobot => times.extend_from_slice(step),
                TimingMode::Summed => times.push(step.iter().sum()),
            }
        }
        for step in &e.constraints_posed {
            constraints.extend(step.iter().map(|&c| c as f64));
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let makespans: Vec<f64> = ok.iter().map(|e| e.makespan).collect();
    Metrics {
        episodes: episodes.len(),
        successes: ok.len(),
        success_rate: if episodes.is_empty() { 0.0 } else { ok.len() as f64 / episodes.len() as f64 },
        makespan: mean(&makespans),
        t_avg: mean(&times),
        t_max: times.iter().copied().reduce(f64::max),
        c_avg: mean(&constraints),
    }
}

#[derive(Serialize)]
struct EpisodeRow {
    step: usize,
    agent: usize,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    ux: Option<f64>,
    uy: Option<f64>,
    solve_time: Option<f64>,
    constraints_posed: Option<usize>,
}

/// One row per agent and executed state. Planners with a single solve unit
/// report that unit for every agent.
pub fn write_episode_csv(result: &EpisodeResult, writer: impl Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let unit = |row: &[f64], a: usize| row.get(a).or(row.first()).copied();
    for step in 0..=result.steps() {
        for (a, history) in result.states.iter().enumerate() {
            let s = history[step];
            let u = result.inputs[a].get(step);
            csv.serialize(EpisodeRow {
                step,
                agent: a,
                x: s.position.x,
                y: s.position.y,
                vx: s.velocity.x,
                vy: s.velocity.y,
                ux: u.map(|u| u.acceleration.x),
                uy: u.map(|u| u.acceleration.y),
                solve_time: result.solve_times.get(step).and_then(|t| unit(t, a)),
                constraints_posed: result
                    .constraints_posed
                    .get(step)
                    .and_then(|c| c.get(a).or(c.first()).copied()),
            })?;
        }
    }
    csv.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub planner: String,
    pub outcome: Outcome,
    pub steps: usize,
    pub makespan: f64,
    pub min_separation: f64,
    pub metrics: Metrics,
    pub message: Option<String>,
}

impl EpisodeSummary {
    pub fn new(result: &EpisodeResult, mode: TimingMode) -> Self {
        Self {
            planner: result.planner.clone(),
            outcome: result.outcome,
            steps: result.steps(),
            makespan: result.makespan,
            min_separation: result.min_separation(),
            metrics: compute_metrics(std::slice::from_ref(result), mode),
            message: result.message.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Write `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_episode_artifacts(result: &EpisodeResult, mode: TimingMode, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_episode_csv(result, std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
    std::fs::write(dir.join(format!("{stem}.json")), EpisodeSummary::new(result, mode).to_json()?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    Cbmpc,
    Joint,
    Prioritized,
    Distributed,
    Vanilla,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 5] = [
        PlannerKind::Cbmpc,
        PlannerKind::Joint,
        PlannerKind::Prioritized,
        PlannerKind::Distributed,
        PlannerKind::Vanilla,
    ];

    /// How solve times of this planner are reported.
    pub fn timing_mode(self) -> TimingMode {
        match self {
            Self::Joint => TimingMode::Summed,
            _ => TimingMode::PerRobot,
        }
    }

    /// `seed` fixes the priority order of the prioritized planner.
    pub fn build(self, scenario: &Scenario, params: &MpcParams, seed: u64) -> Result<Box<dyn Planner>> {
        Ok(match self {
            Self::Cbmpc => Box::new(CbMpcPlanner::new(scenario, params, CbMpcOptions::default())?),
            Self::Joint => Box::new(JointPlanner::new(scenario, params)?),
            Self::Prioritized => Box::new(PrioritizedPlanner::new(
                scenario,
                params,
                PriorityAssignment::random(scenario.num_agents(), seed),
            )?),
            Self::Distributed => Box::new(DistributedPlanner::new(scenario, params)?),
            Self::Vanilla => Box::new(VanillaPlanner::new(scenario, params)?),
        })
    }
}

impl std::str::FromStr for PlannerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cbmpc" => Ok(Self::Cbmpc),
            "joint" => Ok(Self::Joint),
            "prioritized" => Ok(Self::Prioritized),
            "distributed" => Ok(Self::Distributed),
            "vanilla" => Ok(Self::Vanilla),
            other => Err(Error::Parse(format!("unknown planner '{other}'"))),
        }
    }
}

impl std::fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cbmpc => "cbmpc",
            Self::Joint => "joint",
            Self::Prioritized => "prioritized",
            Self::Distributed => "distributed",
            Self::Vanilla => "vanilla",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub env: EnvironmentKind,
    #[serde(default)]
    pub narrow: NarrowGeometry,
    pub planners: Vec<PlannerKind>,
    pub robot_counts: Vec<usize>,
    pub trials: usize,
    pub base_seed: u64,
    pub params: MpcParams,
    pub harness: HarnessConfig,
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchJob {
    pub planner: PlannerKind,
    pub robots: usize,
    pub trial: usize,
    pub seed: u64,
}

impl BatchSpec {
    /// Batch with default tuning, limits and a single worker.
    pub fn new(env: EnvironmentKind, planners: Vec<PlannerKind>, robot_counts: Vec<usize>, trials: usize, base_seed: u64) -> Self {
        Self {
            env,
            narrow: NarrowGeometry::default(),
            planners,
            robot_counts,
            trials,
            base_seed,
            params: MpcParams::default(),
            harness: HarnessConfig::default(),
            workers: 1,
        }
    }

    /// Jobs ordered by robot count, trial, then planner.
    pub fn jobs(&self) -> Vec<BatchJob> {
        let mut jobs = Vec::new();
        for &robots in &self.robot_counts {
            for trial in 0..self.trials {
                for &planner in &self.planners {
                    jobs.push(BatchJob {
                        planner,
                        robots,
                        trial,
                        seed: self.base_seed + trial as u64,
                    });
                }
            }
        }
        jobs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchEntry {
    pub job: BatchJob,
    pub scenario: Option<Scenario>,
    pub result: std::result::Result<EpisodeResult, String>,
}

pub fn run_job(spec: &BatchSpec, job: &BatchJob) -> BatchEntry {
    let scenario = EnvironmentSpec {
        narrow: spec.narrow,
        ..EnvironmentSpec::new(spec.env, job.seed, job.robots)
    }
    .build();
    let result = scenario.as_ref().map_err(|e| e.to_string()).and_then(|s| {
        let mut planner = job.planner.build(s, &spec.params, job.seed).map_err(|e| e.to_string())?;
        run_episode(s, planner.as_mut(), &spec.params, &spec.harness).map_err(|e| e.to_string())
    });
    BatchEntry {
        job: *job,
        scenario: scenario.ok(),
        result,
    }
}

/// Run every job of `spec` on a pool of `spec.workers` threads. Entries come
/// back in job order.
pub fn run_batch(spec: &BatchSpec) -> Result<Vec<BatchEntry>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let jobs = spec.jobs();
    Ok(pool.install(|| jobs.par_iter().map(|job| run_job(spec, job)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub planner: PlannerKind,
    pub robots: usize,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub makespan: Option<f64>,
    pub c_avg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub planner: PlannerKind,
    pub robots: usize,
    pub t_avg: Option<f64>,
    pub t_max: Option<f64>,
    pub t_avg_summed: Option<f64>,
    pub t_max_summed: Option<f64>,
}

/// Per (planner, robot count) metrics in first-appearance order. Generation
/// failures count as failed trials.
pub fn aggregate(entries: &[BatchEntry]) -> (Vec<AggregateRow>, Vec<TimingRow>) {
    let mut keys: Vec<(PlannerKind, usize)> = Vec::new();
    for e in entries {
        let key = (e.job.planner, e.job.robots);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for (planner, robots) in keys {
        let group: Vec<&BatchEntry> =
            entries.iter().filter(|e| e.job.planner == planner && e.job.robots == robots).collect();
        let results: Vec<EpisodeResult> = group.iter().filter_map(|e| e.result.as_ref().ok().cloned()).collect();
        let per_robot = compute_metrics(&results, TimingMode::PerRobot);
        let summed = compute_metrics(&results, TimingMode::Summed);
        rows.push(AggregateRow {
            planner,
            robots,
            trials: group.len(),
            successes: per_robot.successes,
            success_rate: per_robot.successes as f64 / group.len() as f64,
            makespan: per_robot.makespan,
            c_avg: per_robot.c_avg,
        });
        timing.push(TimingRow {
            planner,
            robots,
            t_avg: per_robot.t_avg,
            t_max: per_robot.t_max,
            t_avg_summed: summed.t_avg,
            t_max_summed: summed.t_max,
        });
    }
    (rows, timing)
}

pub fn write_csv<T: Serialize>(rows: &[T], writer: impl Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}
