//! Grid CBS against uniform-cost search in the joint space of two agents.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use cbmpc::cbs::{plan_cbs, Cell, Grid};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Report;

const SIDE: i32 = 4;

fn moves(grid: &Grid, c: Cell) -> Vec<Cell> {
    [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]
        .iter()
        .map(|(dx, dy)| Cell::new(c.x + dx, c.y + dy))
        .filter(|n| grid.is_free(*n))
        .collect()
}

/// Joint state: both positions and whether each agent has settled at its
/// goal for good. Moving or waiting costs one per unsettled agent; settling
/// at the goal is free and final.
fn joint_optimum(grid: &Grid, starts: [Cell; 2], goals: [Cell; 2]) -> Option<usize> {
    type State = (Cell, Cell, bool, bool);
    let mut dist: HashMap<State, usize> = HashMap::new();
    let mut open = BinaryHeap::new();
    let start = (starts[0], starts[1], false, false);
    dist.insert(start, 0);
    open.push(Reverse((0usize, start)));
    while let Some(Reverse((d, s))) = open.pop() {
        if dist.get(&s).is_some_and(|&best| best < d) {
            continue;
        }
        let (a, b, fa, fb) = s;
        if fa && fb {
            return Some(d);
        }
        let mut succ: Vec<(State, usize)> = Vec::new();
        if !fa && a == goals[0] {
            succ.push(((a, b, true, fb), 0));
        }
        if !fb && b == goals[1] {
            succ.push(((a, b, fa, true), 0));
        }
        let next_a = if fa { vec![a] } else { moves(grid, a) };
        let next_b = if fb { vec![b] } else { moves(grid, b) };
        let step_cost = usize::from(!fa) + usize::from(!fb);
        for &na in &next_a {
            for &nb in &next_b {
                let swap = na == b && nb == a && a != b;
                if na == nb || swap {
                    continue;
                }
                succ.push(((na, nb, fa, fb), step_cost));
            }
        }
        for (t, c) in succ {
            let nd = d + c;
            if dist.get(&t).is_none_or(|&best| nd < best) {
                dist.insert(t, nd);
                open.push(Reverse((nd, t)));
            }
        }
    }
    None
}

fn path_is_valid(grid: &Grid, path: &[Cell], start: Cell, goal: Cell) -> bool {
    path.first() == Some(&start)
        && path.last() == Some(&goal)
        && path.windows(2).all(|w| moves(grid, w[0]).contains(&w[1]))
}

/// Compare CBS sum of costs with joint search on `count` solvable 2-agent
/// instances with 0 to 3 blocked cells. Unsolvable draws must make CBS fail.
pub fn check(count: usize, seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells: Vec<Cell> = (0..SIDE).flat_map(|x| (0..SIDE).map(move |y| Cell::new(x, y))).collect();
    let mut report = Report::default();
    while report.checked < count {
        let mut shuffled = cells.clone();
        shuffled.shuffle(&mut rng);
        let blocked = report.checked % 4;
        let mut grid = Grid::open(SIDE, SIDE);
        for c in &shuffled[..blocked] {
            grid.set_blocked(*c, true);
        }
        let free = &shuffled[blocked..];
        let starts = [free[0], free[1]];
        let mut goal_pool = free.to_vec();
        goal_pool.shuffle(&mut rng);
        let goals = [goal_pool[0], goal_pool[1]];

        let cbs = plan_cbs(&grid, &starts, &goals);
        match joint_optimum(&grid, starts, goals) {
            Some(optimum) => {
                report.checked += 1;
                let Ok(paths) = cbs else {
                    report.failures.push(format!("{starts:?} -> {goals:?}: CBS failed on a solvable instance"));
                    continue;
                };
                if (0..2).any(|a| !path_is_valid(&grid, &paths[a], starts[a], goals[a])) {
                    report.failures.push(format!("{starts:?} -> {goals:?}: invalid path"));
                }
                let soc: usize = paths.iter().map(|p| p.len() - 1).sum();
                report.worst = report.worst.max(soc.abs_diff(optimum) as f64);
                if soc != optimum {
                    report.failures.push(format!("{starts:?} -> {goals:?}: CBS {soc} vs optimum {optimum}"));
                }
            }
            None => {
                report.skipped += 1;
                if cbs.is_ok() {
                    report.failures.push(format!("{starts:?} -> {goals:?}: CBS planned an unsolvable instance"));
                }
            }
        }
    }
    report
}
