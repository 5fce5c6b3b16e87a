//! Benchmark scenario generators.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_scenario, AgentSpec, AgentState, Bounds, Obstacle, Scenario, Vec2};

pub const FOOTPRINT_DIAMETER: f64 = 0.3;
pub const EPS_GOAL: f64 = 0.2;
pub const EPS_ROBOT: f64 = 0.05;
pub const EPS_OBSTACLE: f64 = 0.05;

const MAX_GENERATION_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentKind {
    Narrow,
    Open,
    Cluttered,
}

impl std::str::FromStr for EnvironmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "narrow" => Ok(Self::Narrow),
            "open" => Ok(Self::Open),
            "cluttered" => Ok(Self::Cluttered),
            other => Err(Error::Parse(format!("unknown environment '{other}'"))),
        }
    }
}

impl std::fmt::Display for EnvironmentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Narrow => "narrow",
            Self::Open => "open",
            Self::Cluttered => "cluttered",
        })
    }
}

/// Corridor of the narrow environment: two walls of overlapping circles on
/// lines parallel to the `y = x` diagonal. The default corridor sits
/// towards agent 0's start, slightly off the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NarrowGeometry {
    /// Offset of the corridor midpoint along the diagonal from the origin [m].
    pub center_offset: f64,
    /// Shift of the corridor centre line across the diagonal [m].
    pub lateral_offset: f64,
    pub length: f64,
    pub wall_diameter: f64,
    /// Distance between neighbouring wall circle centres.
    pub spacing: f64,
    /// Free width between the wall surfaces.
    pub clear_width: f64,
}

impl Default for NarrowGeometry {
    fn default() -> Self {
        Self {
            center_offset: 2.25,
            lateral_offset: 0.1,
            length: 3.0,
            wall_diameter: 0.4,
            spacing: 0.3,
            clear_width: FOOTPRINT_DIAMETER + 2.0 * EPS_ROBOT + 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub kind: EnvironmentKind,
    pub seed: u64,
    pub robots: usize,
    #[serde(default)]
    pub narrow: NarrowGeometry,
}

impl EnvironmentSpec {
    pub fn new(kind: EnvironmentKind, seed: u64, robots: usize) -> Self {
        Self {
            kind,
            seed,
            robots,
            narrow: NarrowGeometry::default(),
        }
    }

    pub fn build(&self) -> Result<Scenario> {
        if self.robots == 0 {
            return Err(Error::InvalidParameter("robot count must be at least 1".into()));
        }
        match self.kind {
            EnvironmentKind::Narrow => Ok(make_narrow_with(&self.narrow)),
            EnvironmentKind::Open => Ok(make_open()),
            EnvironmentKind::Cluttered => make_cluttered(self.seed, self.robots),
        }
    }
}

fn agent(id: usize, start: (f64, f64), goal: (f64, f64)) -> AgentSpec {
    AgentSpec {
        id,
        start: AgentState::at_rest(start.0, start.1),
        goal: AgentState::at_rest(goal.0, goal.1),
    }
}

fn scenario(agents: Vec<AgentSpec>, obstacles: Vec<Obstacle>, bounds: Bounds) -> Scenario {
    Scenario {
        agents,
        obstacles,
        bounds,
        footprint_diameter: FOOTPRINT_DIAMETER,
        eps_g: EPS_GOAL,
        eps_r: EPS_ROBOT,
        eps_o: EPS_OBSTACLE,
    }
}

pub fn make_narrow() -> Scenario {
    make_narrow_with(&NarrowGeometry::default())
}

/// Two robots swap between `(3, 3)` and `(-3, -3)` through the corridor.
pub fn make_narrow_with(geometry: &NarrowGeometry) -> Scenario {
    let along = Vec2::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2);
    let across = Vec2::new(-FRAC_1_SQRT_2, FRAC_1_SQRT_2);
    let offset = 0.5 * (geometry.clear_width + geometry.wall_diameter);
    let count = (geometry.length / geometry.spacing).round() as usize + 1;
    let first = geometry.center_offset - 0.5 * (count - 1) as f64 * geometry.spacing;
    let mut obstacles = Vec::with_capacity(2 * count);
    for side in [1.0, -1.0] {
        for k in 0..count {
            let c = along * (first + k as f64 * geometry.spacing) + across * (geometry.lateral_offset + side * offset);
            obstacles.push(Obstacle {
                center: c,
                diameter: geometry.wall_diameter,
            });
        }
    }
    scenario(
        vec![agent(0, (3.0, 3.0), (-3.0, -3.0)), agent(1, (-3.0, -3.0), (3.0, 3.0))],
        obstacles,
        Bounds::new(-4.0, -4.0, 4.0, 4.0),
    )
}

/// Four robots swap with the robot across on an empty map.
pub fn make_open() -> Scenario {
    scenario(
        vec![
            agent(0, (0.0, -2.0), (0.0, 2.0)),
            agent(1, (0.0, 2.0), (0.0, -2.0)),
            agent(2, (-2.0, 0.0), (2.0, 0.0)),
            agent(3, (2.0, 0.0), (-2.0, 0.0)),
        ],
        Vec::new(),
        Bounds::new(-3.0, -3.0, 3.0, 3.0),
    )
}

/// Random 5 x 5 m map with six circular obstacles and `robots` agents.
/// Candidates are drawn until one passes every feasibility condition.
pub fn make_cluttered(seed: u64, robots: usize) -> Result<Scenario> {
    if robots == 0 {
        return Err(Error::InvalidParameter("robot count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = Bounds::new(0.0, 0.0, 5.0, 5.0);
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        if let Some(s) = draw_cluttered(&mut rng, bounds, robots) {
            if validate_scenario(&s).is_valid() {
                return Ok(s);
            }
        }
    }
    Err(Error::Generation(MAX_GENERATION_ATTEMPTS))
}

fn draw_cluttered(rng: &mut ChaCha8Rng, bounds: Bounds, robots: usize) -> Option<Scenario> {
    const TRIES: usize = 200;
    let mut s = scenario(Vec::new(), Vec::new(), bounds);
    let gap = crate::model::obstacle_gap_margin(&s);
    let uniform = |rng: &mut ChaCha8Rng, b: &Bounds| {
        Vec2::new(rng.random_range(b.min.x..b.max.x), rng.random_range(b.min.y..b.max.y))
    };

    for _ in 0..6 {
        let placed = (0..TRIES).find_map(|_| {
            let diameter = rng.random_range(0.4..=0.8);
            let center = uniform(rng, &bounds);
            let fits = s
                .obstacles
                .iter()
                .all(|o| (o.center - center).norm() - o.radius() - 0.5 * diameter >= gap);
            fits.then_some(Obstacle { center, diameter })
        })?;
        s.obstacles.push(placed);
    }

    let inner = bounds.shrink(FOOTPRINT_DIAMETER);
    let min_gap = 3.0 * FOOTPRINT_DIAMETER;
    let mut points: Vec<Vec2> = Vec::with_capacity(2 * robots);
    for _ in 0..2 * robots {
        let p = (0..TRIES).find_map(|_| {
            let p = uniform(rng, &inner);
            let clear = s.obstacles.iter().all(|o| (p - o.center).norm() >= s.keep_out_radius(o))
                && points.iter().all(|q| (p - q).norm() >= min_gap);
            clear.then_some(p)
        })?;
        points.push(p);
    }
    s.agents = (0..robots)
        .map(|i| AgentSpec {
            id: i,
            start: AgentState::new(points[2 * i], Vec2::zeros()),
            goal: AgentState::new(points[2 * i + 1], Vec2::zeros()),
        })
        .collect();
    Some(s)
}
