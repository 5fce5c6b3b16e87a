//! Grid conflict-based search, used to produce reference paths for the MPC
//! planners.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentState, Scenario, Vec2};
use crate::mpc::ReferenceTrajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    fn adjacent_or_same(self, other: Cell) -> bool {
        (self.x - other.x).abs() + (self.y - other.y).abs() <= 1
    }
}

/// Occupancy grid. Cell `(i, j)` is centred at `origin + cell_size * (i, j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub cell_size: f64,
    pub origin: Vec2,
    pub width: i32,
    pub height: i32,
    blocked: Vec<bool>,
}

impl Grid {
    pub fn open(width: i32, height: i32) -> Self {
        Self {
            cell_size: 1.0,
            origin: Vec2::zeros(),
            width,
            height,
            blocked: vec![false; (width * height) as usize],
        }
    }

    /// Rasterise a scenario. Cell centres sit on multiples of `cell_size`
    /// inside the bounds; a cell is blocked when its centre is closer to an
    /// obstacle centre than the obstacle's keep-out radius.
    pub fn from_scenario(scenario: &Scenario, cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        let b = &scenario.bounds;
        let ix0 = (b.min.x / cell_size - 1e-9).ceil() as i32;
        let iy0 = (b.min.y / cell_size - 1e-9).ceil() as i32;
        let ix1 = (b.max.x / cell_size + 1e-9).floor() as i32;
        let iy1 = (b.max.y / cell_size + 1e-9).floor() as i32;
        let mut grid = Self {
            cell_size,
            origin: Vec2::new(ix0 as f64 * cell_size, iy0 as f64 * cell_size),
            width: (ix1 - ix0 + 1).max(0),
            height: (iy1 - iy0 + 1).max(0),
            blocked: Vec::new(),
        };
        grid.blocked = vec![false; (grid.width * grid.height) as usize];
        for y in 0..grid.height {
            for x in 0..grid.width {
                let c = grid.center(Cell::new(x, y));
                let hit = scenario
                    .obstacles
                    .iter()
                    .any(|o| (c - o.center).norm() < scenario.keep_out_radius(o));
                grid.set_blocked(Cell::new(x, y), hit);
            }
        }
        grid
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && c.x < self.width && c.y < self.height
    }

    fn index(&self, c: Cell) -> usize {
        (c.y * self.width + c.x) as usize
    }

    pub fn set_blocked(&mut self, c: Cell, blocked: bool) {
        let i = self.index(c);
        self.blocked[i] = blocked;
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.contains(c) && !self.blocked[self.index(c)]
    }

    pub fn center(&self, c: Cell) -> Vec2 {
        self.origin + Vec2::new(c.x as f64, c.y as f64) * self.cell_size
    }

    /// Nearest cell to a point, if the point lies over the grid.
    pub fn cell_of(&self, p: Vec2) -> Option<Cell> {
        let rel = (p - self.origin) / self.cell_size;
        let c = Cell::new(rel.x.round() as i32, rel.y.round() as i32);
        self.contains(c).then_some(c)
    }

    /// Free 4-neighbours plus the cell itself (waiting).
    fn moves(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]
            .into_iter()
            .map(move |(dx, dy)| Cell::new(c.x + dx, c.y + dy))
            .filter(|n| self.is_free(*n))
    }

    /// Breadth-first distances to `goal` over free cells.
    pub fn distances_to(&self, goal: Cell) -> HashMap<Cell, u32> {
        let mut dist = HashMap::new();
        if !self.is_free(goal) {
            return dist;
        }
        dist.insert(goal, 0);
        let mut queue = VecDeque::from([goal]);
        while let Some(c) = queue.pop_front() {
            let d = dist[&c];
            for n in self.moves(c) {
                dist.entry(n).or_insert_with(|| {
                    queue.push_back(n);
                    d + 1
                });
            }
        }
        dist
    }
}

/// Timed cell sequences, one per agent. Entry `t` is the cell occupied at
/// time `t`; agents stay at their last cell afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePlan {
    pub paths: Vec<Vec<Cell>>,
    pub cell_size: f64,
    pub origin: Vec2,
    /// Continuous start and goal positions the plan connects.
    pub starts: Vec<Vec2>,
    pub goals: Vec<Vec2>,
}

impl DiscretePlan {
    pub fn sum_of_costs(&self) -> usize {
        self.paths.iter().map(|p| p.len() - 1).sum()
    }

    pub fn makespan(&self) -> usize {
        self.paths.iter().map(|p| p.len() - 1).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialises")
    }

    /// First vertex or edge conflict between two agents, if any.
    pub fn first_conflict(&self) -> Option<CbsConflict> {
        first_conflict(&self.paths)
    }

    /// Every step moves to a 4-neighbour or waits.
    pub fn is_connected(&self) -> bool {
        self.paths
            .iter()
            .all(|p| p.windows(2).all(|w| w[0].adjacent_or_same(w[1])))
    }

    fn center(&self, c: Cell) -> Vec2 {
        self.origin + Vec2::new(c.x as f64, c.y as f64) * self.cell_size
    }

    /// Dense reference per agent, sampled every `dt` while traversing one
    /// cell per `cell_size / v_ref` seconds. The first and last waypoints
    /// are the continuous start and goal. Velocities are forward
    /// differences; the final sample is at rest.
    pub fn dense_paths(&self, v_ref: f64, dt: f64) -> Vec<Vec<AgentState>> {
        assert!(v_ref > 0.0 && dt > 0.0, "speed and sample time must be positive");
        let step_time = self.cell_size / v_ref;
        self.paths
            .iter()
            .enumerate()
            .map(|(a, path)| {
                let mut way: Vec<Vec2> = path.iter().map(|c| self.center(*c)).collect();
                way[0] = self.starts[a];
                let last = way.len() - 1;
                if last == 0 {
                    way.push(self.goals[a]);
                } else {
                    way[last] = self.goals[a];
                }
                let duration = (way.len() - 1) as f64 * step_time;
                let samples = (duration / dt - 1e-9).ceil() as usize;
                let positions: Vec<Vec2> = (0..=samples)
                    .map(|k| {
                        let s = ((k as f64 * dt) / step_time).min((way.len() - 1) as f64);
                        let i = (s.floor() as usize).min(way.len() - 2);
                        let f = s - i as f64;
                        way[i] + (way[i + 1] - way[i]) * f
                    })
                    .collect();
                let mut states: Vec<AgentState> = positions
                    .windows(2)
                    .map(|w| AgentState::new(w[0], (w[1] - w[0]) / dt))
                    .collect();
                states.push(AgentState::new(*positions.last().unwrap(), Vec2::zeros()));
                states
            })
            .collect()
    }
}

/// References for every agent over one horizon, starting `time_step`
/// samples into the plan.
pub fn to_reference(
    plan: &DiscretePlan,
    v_ref: f64,
    dt: f64,
    horizon: usize,
    time_step: usize,
) -> Vec<ReferenceTrajectory> {
    plan.dense_paths(v_ref, dt)
        .iter()
        .map(|p| ReferenceTrajectory::window(p, time_step, horizon))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CbsConflict {
    Vertex { agents: (usize, usize), cell: Cell, time: usize },
    Edge { agents: (usize, usize), from: Cell, to: Cell, time: usize },
}

fn at(path: &[Cell], t: usize) -> Cell {
    path[t.min(path.len() - 1)]
}

fn first_conflict(paths: &[Vec<Cell>]) -> Option<CbsConflict> {
    let horizon = paths.iter().map(Vec::len).max().unwrap_or(0);
    for t in 0..horizon {
        for i in 0..paths.len() {
            for j in i + 1..paths.len() {
                let (a, b) = (at(&paths[i], t), at(&paths[j], t));
                if a == b {
                    return Some(CbsConflict::Vertex { agents: (i, j), cell: a, time: t });
                }
                if t + 1 < horizon {
                    let (a1, b1) = (at(&paths[i], t + 1), at(&paths[j], t + 1));
                    if a == b1 && b == a1 && a != a1 {
                        return Some(CbsConflict::Edge { agents: (i, j), from: a, to: a1, time: t });
                    }
                }
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CbsError {
    #[error("agent {0} starts or ends on a blocked or off-grid cell")]
    BlockedEndpoint(usize),
    #[error("no path for agent {0}")]
    NoPath(usize),
    #[error("constraint tree node limit of {0} reached")]
    NodeLimit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Constraint {
    /// Not at `cell` at `time`.
    Vertex { cell: Cell, time: usize },
    /// Not moving `from -> to` between `time` and `time + 1`.
    Edge { from: Cell, to: Cell, time: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct CbsOptions {
    pub node_limit: usize,
}

impl Default for CbsOptions {
    fn default() -> Self {
        Self { node_limit: 10_000 }
    }
}

/// Space-time A* for one agent under CBS constraints. Returns the cheapest
/// path that reaches the goal and can stay there forever.
fn low_level(
    grid: &Grid,
    start: Cell,
    goal: Cell,
    heuristic: &HashMap<Cell, u32>,
    constraints: &HashSet<Constraint>,
) -> Option<Vec<Cell>> {
    let lower = *heuristic.get(&start)? as usize;
    let latest = constraints
        .iter()
        .map(|c| match c {
            Constraint::Vertex { time, .. } | Constraint::Edge { time, .. } => *time + 1,
        })
        .max()
        .unwrap_or(0);
    // a goal visit is final only after the last vertex constraint on it
    let goal_free_from = constraints
        .iter()
        .filter_map(|c| match c {
            Constraint::Vertex { cell, time } if *cell == goal => Some(*time + 1),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    let time_cap = 4 * lower.max(1) + latest;

    let mut open = BinaryHeap::new();
    let mut parent: HashMap<(Cell, usize), (Cell, usize)> = HashMap::new();
    let mut closed: HashSet<(Cell, usize)> = HashSet::new();
    // (f, g-reversed for deeper-first ties, cell, time)
    open.push(Reverse((lower, Reverse(0usize), start, 0usize)));
    while let Some(Reverse((_, _, cell, t))) = open.pop() {
        if !closed.insert((cell, t)) {
            continue;
        }
        if cell == goal && t >= goal_free_from {
            let mut path = vec![cell];
            let mut key = (cell, t);
            while let Some(&prev) = parent.get(&key) {
                path.push(prev.0);
                key = prev;
            }
            path.reverse();
            return Some(path);
        }
        if t >= time_cap {
            continue;
        }
        for next in grid.moves(cell) {
            let nt = t + 1;
            if constraints.contains(&Constraint::Vertex { cell: next, time: nt })
                || constraints.contains(&Constraint::Edge { from: cell, to: next, time: t })
                || closed.contains(&(next, nt))
            {
                continue;
            }
            let Some(&h) = heuristic.get(&next) else { continue };
            let key = (next, nt);
            if let std::collections::hash_map::Entry::Vacant(e) = parent.entry(key) {
                e.insert((cell, t));
                open.push(Reverse((nt + h as usize, Reverse(nt), next, nt)));
            }
        }
    }
    None
}

struct CtNode {
    constraints: Vec<HashSet<Constraint>>,
    paths: Vec<Vec<Cell>>,
}

/// Conflict-based search on `grid`. The result minimises the sum over
/// agents of the time of final arrival at the goal.
pub fn plan_cbs(grid: &Grid, starts: &[Cell], goals: &[Cell]) -> Result<Vec<Vec<Cell>>, CbsError> {
    plan_cbs_with(grid, starts, goals, &CbsOptions::default())
}

pub fn plan_cbs_with(
    grid: &Grid,
    starts: &[Cell],
    goals: &[Cell],
    options: &CbsOptions,
) -> Result<Vec<Vec<Cell>>, CbsError> {
    assert_eq!(starts.len(), goals.len(), "one goal per start");
    for (a, (s, g)) in starts.iter().zip(goals).enumerate() {
        if !grid.is_free(*s) || !grid.is_free(*g) {
            return Err(CbsError::BlockedEndpoint(a));
        }
    }
    let heuristics: Vec<_> = goals.iter().map(|g| grid.distances_to(*g)).collect();
    let n = starts.len();
    let constraints = vec![HashSet::new(); n];
    let mut paths = Vec::with_capacity(n);
    for a in 0..n {
        paths.push(low_level(grid, starts[a], goals[a], &heuristics[a], &constraints[a]).ok_or(CbsError::NoPath(a))?);
    }
    let cost: usize = paths.iter().map(|p| p.len() - 1).sum();
    let mut nodes = vec![CtNode { constraints, paths }];
    let mut open = BinaryHeap::new();
    open.push(Reverse((cost, 0usize)));

    while let Some(Reverse((_, id))) = open.pop() {
        let Some(conflict) = first_conflict(&nodes[id].paths) else {
            return Ok(std::mem::take(&mut nodes[id].paths));
        };
        let branches = match conflict {
            CbsConflict::Vertex { agents: (i, j), cell, time } => [
                (i, Constraint::Vertex { cell, time }),
                (j, Constraint::Vertex { cell, time }),
            ],
            CbsConflict::Edge { agents: (i, j), from, to, time } => [
                (i, Constraint::Edge { from, to, time }),
                (j, Constraint::Edge { from: to, to: from, time }),
            ],
        };
        for (agent, constraint) in branches {
            if nodes.len() >= options.node_limit {
                return Err(CbsError::NodeLimit(options.node_limit));
            }
            let mut constraints = nodes[id].constraints.clone();
            constraints[agent].insert(constraint);
            let Some(path) = low_level(grid, starts[agent], goals[agent], &heuristics[agent], &constraints[agent])
            else {
                continue;
            };
            let mut paths = nodes[id].paths.clone();
            paths[agent] = path;
            let cost = paths.iter().map(|p| p.len() - 1).sum();
            open.push(Reverse((cost, nodes.len())));
            nodes.push(CtNode { constraints, paths });
        }
    }
    Err(CbsError::NoPath(0))
}

/// Plan a scenario on a grid of `cell_size` cells.
pub fn plan_scenario(scenario: &Scenario, cell_size: f64) -> Result<DiscretePlan, CbsError> {
    let grid = Grid::from_scenario(scenario, cell_size);
    let cells = |points: Vec<Vec2>| -> Result<Vec<Cell>, CbsError> {
        points
            .into_iter()
            .enumerate()
            .map(|(a, p)| grid.cell_of(p).ok_or(CbsError::BlockedEndpoint(a)))
            .collect()
    };
    let starts = scenario.starts().into_iter().map(|s| s.position).collect::<Vec<_>>();
    let goals = scenario.goals();
    let paths = plan_cbs(&grid, &cells(starts.clone())?, &cells(goals.clone())?)?;
    Ok(DiscretePlan {
        paths,
        cell_size,
        origin: grid.origin,
        starts,
        goals,
    })
}
