//! Core domain types: agent states, the double-integrator model, obstacles
//! and scenarios.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;

/// Speed below which an agent inside the goal tolerance counts as arrived.
pub const GOAL_SPEED_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec2,
    pub velocity: Vec2,
}

impl AgentState {
    pub fn new(position: Vec2, velocity: Vec2) -> Self {
        Self { position, velocity }
    }

    pub fn at_rest(x: f64, y: f64) -> Self {
        Self::new(Vec2::new(x, y), Vec2::zeros())
    }

    /// Stacked `[x, y, vx, vy]`.
    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(
            self.position.x,
            self.position.y,
            self.velocity.x,
            self.velocity.y,
        )
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(Vec2::new(v[0], v[1]), Vec2::new(v[2], v[3]))
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.velocity.iter()).all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub acceleration: Vec2,
}

impl ControlInput {
    pub fn new(ax: f64, ay: f64) -> Self {
        Self {
            acceleration: Vec2::new(ax, ay),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.acceleration.iter().all(|c| c.is_finite())
    }
}

/// Discrete-time planar double integrator `x' = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    dt: f64,
    a: Matrix4<f64>,
    b: Matrix4x2<f64>,
}

impl DynamicsModel {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn a(&self) -> &Matrix4<f64> {
        &self.a
    }

    pub fn b(&self) -> &Matrix4x2<f64> {
        &self.b
    }

    pub fn propagate(&self, x: &AgentState, u: &ControlInput) -> AgentState {
        AgentState::from_vector(&(self.a * x.to_vector() + self.b * u.acceleration))
    }
}

pub fn make_double_integrator(dt: f64) -> Result<DynamicsModel> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "time step must be positive and finite, got {dt}"
        )));
    }
    let half = 0.5 * dt * dt;
    #[rustfmt::skip]
    let a = Matrix4::new(
        1.0, 0.0, dt,  0.0,
        0.0, 1.0, 0.0, dt,
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    );
    #[rustfmt::skip]
    let b = Matrix4x2::new(
        half, 0.0,
        0.0,  half,
        dt,   0.0,
        0.0,  dt,
    );
    Ok(DynamicsModel { dt, a, b })
}

/// Free-function form of [`DynamicsModel::propagate`].
pub fn propagate(model: &DynamicsModel, x: &AgentState, u: &ControlInput) -> AgentState {
    model.propagate(x, u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec2,
    pub diameter: f64,
}

impl Obstacle {
    pub fn new(x: f64, y: f64, diameter: f64) -> Self {
        Self {
            center: Vec2::new(x, y),
            diameter,
        }
    }

    pub fn radius(&self) -> f64 {
        0.5 * self.diameter
    }
}

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec2,
    pub max: Vec2,
}

impl Bounds {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            min: Vec2::new(min_x, min_y),
            max: Vec2::new(max_x, max_y),
        }
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn shrink(&self, margin: f64) -> Bounds {
        Bounds {
            min: self.min.add_scalar(margin),
            max: self.max.add_scalar(-margin),
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.min.x < self.max.x && self.min.y < self.max.y)
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: usize,
    pub start: AgentState,
    pub goal: AgentState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub bounds: Bounds,
    /// Robot footprint diameter `D`.
    pub footprint_diameter: f64,
    pub eps_g: f64,
    pub eps_r: f64,
    pub eps_o: f64,
}

impl Scenario {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    /// Minimum centre distance between two robots, `D + eps_r`.
    pub fn separation(&self) -> f64 {
        self.footprint_diameter + self.eps_r
    }

    /// Minimum robot-centre clearance from an obstacle surface, `D/2 + eps_o`.
    pub fn obstacle_clearance(&self) -> f64 {
        0.5 * self.footprint_diameter + self.eps_o
    }

    /// Keep-out radius around an obstacle centre.
    pub fn keep_out_radius(&self, obstacle: &Obstacle) -> f64 {
        obstacle.radius() + self.obstacle_clearance()
    }

    pub fn goals(&self) -> Vec<Vec2> {
        self.agents.iter().map(|a| a.goal.position).collect()
    }

    pub fn starts(&self) -> Vec<AgentState> {
        self.agents.iter().map(|a| a.start).collect()
    }

    /// Terminal test: inside the goal tolerance and nearly stopped.
    pub fn reached_goal(&self, agent: usize, state: &AgentState) -> bool {
        let goal = &self.agents[agent].goal;
        (goal.position - state.position).norm() <= self.eps_g
            && state.velocity.norm() <= GOAL_SPEED_TOLERANCE
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Predicted or executed plan of a single agent: `N + 1` states, `N` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<AgentState>,
    pub inputs: Vec<ControlInput>,
}

impl Trajectory {
    /// Roll the dynamics forward from `x0`.
    pub fn rollout(model: &DynamicsModel, x0: AgentState, inputs: Vec<ControlInput>) -> Self {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(x0);
        for u in &inputs {
            let next = model.propagate(states.last().unwrap(), u);
            states.push(next);
        }
        Self { states, inputs }
    }

    /// Zero-input trajectory from `x0`.
    pub fn coasting(model: &DynamicsModel, x0: AgentState, horizon: usize) -> Self {
        Self::rollout(model, x0, vec![ControlInput::zero(); horizon])
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    pub fn position(&self, step: usize) -> Vec2 {
        self.states[step].position
    }

    pub fn initial(&self) -> &AgentState {
        &self.states[0]
    }

    pub fn terminal(&self) -> &AgentState {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Largest per-component mismatch of the recurrence `x[l+1] = A x[l] + B u[l]`.
    pub fn dynamics_residual(&self, model: &DynamicsModel) -> f64 {
        self.inputs
            .iter()
            .enumerate()
            .map(|(l, u)| {
                let predicted = model.propagate(&self.states[l], u).to_vector();
                (predicted - self.states[l + 1].to_vector()).amax()
            })
            .fold(0.0, f64::max)
    }

    pub fn is_consistent(&self, model: &DynamicsModel, tol: f64) -> bool {
        self.states.len() == self.inputs.len() + 1 && self.dynamics_residual(model) <= tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    InvalidParameter(String),
    DuplicateId(usize),
    OutOfBounds { agent: usize },
    /// Condition 1: two start (or two goal) discs overlap.
    StartsOverlap { first: usize, second: usize },
    GoalsOverlap { first: usize, second: usize },
    /// Condition 2: a start or goal lies inside an inflated obstacle.
    StartInObstacle { agent: usize, obstacle: usize },
    GoalInObstacle { agent: usize, obstacle: usize },
    /// Condition 3: not enough room between two obstacles for two robots.
    ObstacleGap { first: usize, second: usize, gap: f64 },
}

impl Violation {
    /// Which of the three feasibility conditions this violates, if any.
    pub fn condition(&self) -> Option<u8> {
        match self {
            Violation::StartsOverlap { .. } | Violation::GoalsOverlap { .. } => Some(1),
            Violation::StartInObstacle { .. } | Violation::GoalInObstacle { .. } => Some(2),
            Violation::ObstacleGap { .. } => Some(3),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidityReport {
    pub violations: Vec<Violation>,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violates(&self, condition: u8) -> bool {
        self.violations.iter().any(|v| v.condition() == Some(condition))
    }

    /// Valid apart from the listed feasibility conditions.
    pub fn is_valid_except(&self, waived: &[u8]) -> bool {
        self.violations
            .iter()
            .all(|v| v.condition().is_some_and(|c| waived.contains(&c)))
    }
}

/// Minimum surface-to-surface distance two obstacles must keep so that two
/// inflated robots fit side by side.
pub fn obstacle_gap_margin(scenario: &Scenario) -> f64 {
    2.0 * scenario.separation()
}

pub fn validate_scenario(s: &Scenario) -> ValidityReport {
    let mut violations = Vec::new();
    let mut param = |ok: bool, what: &str| {
        if !ok {
            violations.push(Violation::InvalidParameter(what.to_string()));
        }
    };
    param(
        s.footprint_diameter > 0.0 && s.footprint_diameter.is_finite(),
        "footprint diameter must be positive",
    );
    param(
        [s.eps_g, s.eps_r, s.eps_o].iter().all(|e| *e >= 0.0 && e.is_finite()),
        "tolerances must be non-negative",
    );
    param(!s.bounds.is_empty(), "bounds must be non-empty");
    param(
        s.obstacles.iter().all(|o| o.diameter > 0.0 && o.center.iter().all(|c| c.is_finite())),
        "obstacle diameters must be positive",
    );

    let mut ids: Vec<usize> = s.agents.iter().map(|a| a.id).collect();
    ids.sort_unstable();
    for w in ids.windows(2) {
        if w[0] == w[1] {
            violations.push(Violation::DuplicateId(w[0]));
        }
    }

    for (i, a) in s.agents.iter().enumerate() {
        if !(a.start.is_finite() && a.goal.is_finite())
            || !s.bounds.contains(&a.start.position)
            || !s.bounds.contains(&a.goal.position)
        {
            violations.push(Violation::OutOfBounds { agent: i });
        }
    }

    let sep = s.separation();
    for i in 0..s.agents.len() {
        for j in i + 1..s.agents.len() {
            let (a, b) = (&s.agents[i], &s.agents[j]);
            if (a.start.position - b.start.position).norm() < sep {
                violations.push(Violation::StartsOverlap { first: i, second: j });
            }
            if (a.goal.position - b.goal.position).norm() < sep {
                violations.push(Violation::GoalsOverlap { first: i, second: j });
            }
        }
    }

    for (i, a) in s.agents.iter().enumerate() {
        for (o, obs) in s.obstacles.iter().enumerate() {
            let keep_out = s.keep_out_radius(obs);
            if (a.start.position - obs.center).norm() < keep_out {
                violations.push(Violation::StartInObstacle { agent: i, obstacle: o });
            }
            if (a.goal.position - obs.center).norm() < keep_out {
                violations.push(Violation::GoalInObstacle { agent: i, obstacle: o });
            }
        }
    }

    let margin = obstacle_gap_margin(s);
    for i in 0..s.obstacles.len() {
        for j in i + 1..s.obstacles.len() {
            let (a, b) = (&s.obstacles[i], &s.obstacles[j]);
            let gap = (a.center - b.center).norm() - a.radius() - b.radius();
            if gap < margin {
                violations.push(Violation::ObstacleGap { first: i, second: j, gap });
            }
        }
    }

    ValidityReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_agents(start_b: (f64, f64)) -> Scenario {
        Scenario {
            agents: vec![
                AgentSpec {
                    id: 0,
                    start: AgentState::at_rest(0.0, 0.0),
                    goal: AgentState::at_rest(2.0, 0.0),
                },
                AgentSpec {
                    id: 1,
                    start: AgentState::at_rest(start_b.0, start_b.1),
                    goal: AgentState::at_rest(0.0, 2.0),
                },
            ],
            obstacles: vec![],
            bounds: Bounds::new(-5.0, -5.0, 5.0, 5.0),
            footprint_diameter: 0.3,
            eps_g: 0.2,
            eps_r: 0.05,
            eps_o: 0.05,
        }
    }

    #[test]
    fn double_integrator_matrices() {
        let m = make_double_integrator(0.05).unwrap();
        assert!((m.b()[(0, 0)] - 0.00125).abs() < 1e-15);
        assert!((m.b()[(2, 0)] - 0.05).abs() < 1e-15);
        assert_eq!(m.b()[(0, 1)], 0.0);

        let m = make_double_integrator(1.0).unwrap();
        for i in 0..4 {
            assert_eq!(m.a()[(i, i)], 1.0);
        }
        assert_eq!(m.a()[(0, 2)], 1.0);
        assert_eq!(m.a()[(1, 3)], 1.0);
        assert_eq!(m.a()[(0, 1)], 0.0);
    }

    #[test]
    fn non_positive_dt_rejected() {
        assert!(make_double_integrator(0.0).is_err());
        assert!(make_double_integrator(-0.1).is_err());
        assert!(make_double_integrator(f64::NAN).is_err());
    }

    #[test]
    fn propagate_examples() {
        let m = make_double_integrator(0.05).unwrap();
        let x = m.propagate(&AgentState::at_rest(0.0, 0.0), &ControlInput::new(1.0, 0.0));
        assert!((x.to_vector() - Vector4::new(0.00125, 0.0, 0.05, 0.0)).amax() < 1e-15);

        let x0 = AgentState::new(Vec2::new(1.0, 2.0), Vec2::new(0.5, 0.0));
        let x = m.propagate(&x0, &ControlInput::zero());
        assert!((x.to_vector() - Vector4::new(1.025, 2.0, 0.5, 0.0)).amax() < 1e-15);

        let rest = AgentState::at_rest(-3.7, 12.0);
        assert_eq!(m.propagate(&rest, &ControlInput::zero()), rest);
    }

    #[test]
    fn identical_starts_violate_condition_one() {
        let report = validate_scenario(&two_agents((0.0, 0.0)));
        assert!(report.violates(1));
        assert!(validate_scenario(&two_agents((1.0, 1.0))).is_valid());
    }

    #[test]
    fn start_inside_obstacle_violates_condition_two() {
        let mut s = two_agents((1.0, 1.0));
        s.obstacles.push(Obstacle::new(0.1, 0.0, 0.5));
        let report = validate_scenario(&s);
        assert!(report.violates(2));
        assert!(!report.violates(1));
    }

    #[test]
    fn distant_obstacles_satisfy_condition_three() {
        let mut s = two_agents((1.0, 1.0));
        // centres 10 m apart
        s.obstacles.push(Obstacle::new(-4.0, -3.0, 0.5));
        s.obstacles.push(Obstacle::new(4.0, 3.0, 0.5));
        assert!(!validate_scenario(&s).violates(3));

        s.obstacles[1].center = Vec2::new(-3.0, -3.0);
        assert!(validate_scenario(&s).violates(3));
    }

    #[test]
    fn scenario_json_round_trip() {
        let mut s = two_agents((1.0, 1.0));
        s.obstacles.push(Obstacle::new(3.0, 3.0, 0.6));
        let text = s.to_json().unwrap();
        assert_eq!(Scenario::from_json(&text).unwrap(), s);
        assert!(Scenario::from_json("{ not json").is_err());
    }

    #[test]
    fn goal_test_requires_low_speed() {
        let s = two_agents((1.0, 1.0));
        assert!(s.reached_goal(0, &AgentState::at_rest(1.85, 0.0)));
        assert!(!s.reached_goal(0, &AgentState::at_rest(1.7, 0.0)));
        let moving = AgentState::new(Vec2::new(2.0, 0.0), Vec2::new(0.2, 0.0));
        assert!(!s.reached_goal(0, &moving));
    }

    fn state() -> impl Strategy<Value = AgentState> {
        prop::array::uniform4(-10.0..10.0f64)
            .prop_map(|c| AgentState::new(Vec2::new(c[0], c[1]), Vec2::new(c[2], c[3])))
    }

    fn input() -> impl Strategy<Value = ControlInput> {
        prop::array::uniform2(-5.0..5.0f64).prop_map(|c| ControlInput::new(c[0], c[1]))
    }

    proptest! {
        #[test]
        fn propagate_is_linear(x1 in state(), x2 in state(), u1 in input(), u2 in input()) {
            let m = make_double_integrator(0.05).unwrap();
            let sum_x = AgentState::from_vector(&(x1.to_vector() + x2.to_vector()));
            let sum_u = ControlInput { acceleration: u1.acceleration + u2.acceleration };
            let lhs = m.propagate(&sum_x, &sum_u).to_vector();
            let rhs = m.propagate(&x1, &u1).to_vector() + m.propagate(&x2, &u2).to_vector();
            let zero = m.propagate(&AgentState::at_rest(0.0, 0.0), &ControlInput::zero());
            prop_assert_eq!(zero.to_vector(), Vector4::zeros());
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }

        #[test]
        fn rollout_satisfies_recurrence(x0 in state(), us in prop::collection::vec(input(), 1..40)) {
            let m = make_double_integrator(0.05).unwrap();
            let t = Trajectory::rollout(&m, x0, us);
            prop_assert!(t.is_consistent(&m, 1e-12));
        }
    }
}
