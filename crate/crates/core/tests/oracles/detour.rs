//! Brute-force search over detours for single-agent problems.
//!
//! For fixed tangent directions at every constrained step, replacing each
//! disc by its tangent half-plane gives a convex QP whose solution is
//! feasible for the original problem. The true optimum is the minimum of
//! these QPs over all directions, which the oracle searches by multi-start
//! re-linearisation followed by coordinate search on the angles.

use cbmpc::model::{make_double_integrator, AgentState, Trajectory, Vec2};
use cbmpc::nlp::{
    solve_qp, solve_sqp, AvoidanceConstraint, CostWeights, QpProblem, SqpOptions, StateInputBounds,
    TrajectoryProblem,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Report;

const Q: f64 = 5.0;
const R: f64 = 1.0;
const P: f64 = 40.0;
const SPEED: f64 = 1.5;
const ACCEL: f64 = 2.0;
const VIA_WEIGHT: f64 = 200.0;

#[derive(Clone)]
struct Instance {
    dt: f64,
    horizon: usize,
    start: AgentState,
    goal: AgentState,
    obstacles: Vec<(Vec2, f64)>,
}

/// State at step `l` as `offset + gain * u`, written out for the double
/// integrator without any library support.
struct Affine {
    offset: Vec<DVector<f64>>,
    gain: Vec<DMatrix<f64>>,
}

fn condense(inst: &Instance) -> Affine {
    let n = inst.horizon;
    let dt = inst.dt;
    let p0 = inst.start.position;
    let v0 = inst.start.velocity;
    let mut offset = Vec::new();
    let mut gain = Vec::new();
    for l in 0..=n {
        let lf = l as f64;
        offset.push(DVector::from_vec(vec![
            p0.x + lf * dt * v0.x,
            p0.y + lf * dt * v0.y,
            v0.x,
            v0.y,
        ]));
        let mut g = DMatrix::zeros(4, 2 * n);
        for k in 0..l {
            let w = dt * dt * (lf - k as f64 - 0.5);
            g[(0, 2 * k)] = w;
            g[(1, 2 * k + 1)] = w;
            g[(2, 2 * k)] = dt;
            g[(3, 2 * k + 1)] = dt;
        }
        gain.push(g);
    }
    Affine { offset, gain }
}

fn goal_vector(inst: &Instance) -> DVector<f64> {
    DVector::from_vec(vec![inst.goal.position.x, inst.goal.position.y, inst.goal.velocity.x, inst.goal.velocity.y])
}

fn objective_of(inst: &Instance, states: &[DVector<f64>], inputs: &DVector<f64>) -> f64 {
    let r = goal_vector(inst);
    let n = inst.horizon;
    let tracking: f64 = (0..n).map(|l| Q * (&states[l] - &r).norm_squared()).sum();
    tracking + R * inputs.norm_squared() + P * (&states[n] - &r).norm_squared()
}

fn states_of(aff: &Affine, u: &DVector<f64>) -> Vec<DVector<f64>> {
    aff.offset.iter().zip(&aff.gain).map(|(o, g)| o + g * u).collect()
}

/// Convex restriction for tangent angles `angles[o][l-1]`.
fn restricted_qp(inst: &Instance, aff: &Affine, angles: &[Vec<f64>]) -> QpProblem {
    let n = inst.horizon;
    let nu = 2 * n;
    let r = goal_vector(inst);
    let mut h = DMatrix::identity(nu, nu) * (2.0 * R);
    let mut g = DVector::zeros(nu);
    for l in 1..=n {
        let w = if l == n { P } else { Q };
        h += 2.0 * w * aff.gain[l].transpose() * &aff.gain[l];
        g += 2.0 * w * aff.gain[l].transpose() * (&aff.offset[l] - &r);
    }
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs = Vec::new();
    for l in 1..=n {
        for c in 2..4 {
            let row = aff.gain[l].row(c).transpose();
            rows.push(-&row);
            rhs.push(-SPEED + aff.offset[l][c]);
            rows.push(row);
            rhs.push(-SPEED - aff.offset[l][c]);
        }
        for (o, (center, radius)) in inst.obstacles.iter().enumerate() {
            let t = angles[o][l - 1];
            let normal = Vec2::new(t.cos(), t.sin());
            let row = aff.gain[l].row(0).transpose() * normal.x + aff.gain[l].row(1).transpose() * normal.y;
            let base = normal.x * (aff.offset[l][0] - center.x) + normal.y * (aff.offset[l][1] - center.y);
            rows.push(row);
            rhs.push(radius - base);
        }
    }
    let c = DMatrix::from_fn(rows.len(), nu, |i, j| rows[i][j]);
    QpProblem::unconstrained(h, g)
        .with_inequalities(c, DVector::from_vec(rhs))
        .with_bounds(DVector::from_element(nu, -ACCEL), DVector::from_element(nu, ACCEL))
}

/// Obstacle-free optimum pulled towards `via` at step `at`: the detour
/// family used to seed the search.
fn detour(inst: &Instance, aff: &Affine, via: Vec2, at: usize) -> Option<DVector<f64>> {
    let free = Instance { obstacles: Vec::new(), ..inst.clone() };
    let mut qp = restricted_qp(&free, aff, &[]);
    let pos = aff.gain[at].rows(0, 2).into_owned();
    let off = Vec2::new(aff.offset[at][0], aff.offset[at][1]) - via;
    qp.hessian += 2.0 * VIA_WEIGHT * pos.transpose() * &pos;
    qp.gradient += 2.0 * VIA_WEIGHT * pos.transpose() * DVector::from_column_slice(off.as_slice());
    solve_qp(&qp).ok().map(|s| s.x)
}

fn evaluate(inst: &Instance, aff: &Affine, angles: &[Vec<f64>]) -> Option<(f64, DVector<f64>)> {
    let sol = solve_qp(&restricted_qp(inst, aff, angles)).ok()?;
    let states = states_of(aff, &sol.x);
    Some((objective_of(inst, &states, &sol.x), sol.x))
}

fn angles_at(inst: &Instance, aff: &Affine, u: &DVector<f64>) -> Vec<Vec<f64>> {
    let states = states_of(aff, u);
    inst.obstacles
        .iter()
        .map(|(c, _)| (1..=inst.horizon).map(|l| (states[l][1] - c.y).atan2(states[l][0] - c.x)).collect())
        .collect()
}

/// Convex-concave iteration: re-linearising at the current optimum never
/// increases the objective, since that point stays feasible.
fn relinearise(inst: &Instance, aff: &Affine, mut angles: Vec<Vec<f64>>) -> Option<(f64, Vec<Vec<f64>>)> {
    let (mut best, mut u) = evaluate(inst, aff, &angles)?;
    for _ in 0..200 {
        let next = angles_at(inst, aff, &u);
        let Some((f, x)) = evaluate(inst, aff, &next) else { break };
        if f > best - 1e-12 {
            break;
        }
        best = f;
        u = x;
        angles = next;
    }
    Some((best, angles))
}

/// Coordinate search on individual tangent angles.
fn coordinate_search(inst: &Instance, aff: &Affine, mut best: f64, mut angles: Vec<Vec<f64>>) -> f64 {
    let mut step = 0.1;
    while step > 1e-5 {
        let mut improved = false;
        for o in 0..angles.len() {
            for l in 0..angles[o].len() {
                for dir in [1.0, -1.0] {
                    let mut trial = angles.clone();
                    trial[o][l] += dir * step;
                    if let Some((f, _)) = evaluate(inst, aff, &trial) {
                        if f < best - 1e-12 {
                            best = f;
                            angles = trial;
                            improved = true;
                        }
                    }
                }
            }
        }
        if improved {
            if let Some((f, a)) = relinearise(inst, aff, angles.clone()) {
                best = f;
                angles = a;
            }
        } else {
            step *= 0.5;
        }
    }
    best
}

fn oracle(inst: &Instance) -> f64 {
    let aff = condense(inst);
    let (lo, hi) = inst.obstacles.iter().fold(
        (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY)),
        |(lo, hi), (c, r)| (lo.inf(&(c - Vec2::repeat(2.0 * r))), hi.sup(&(c + Vec2::repeat(2.0 * r)))),
    );
    const GRID: usize = 9;
    let n = inst.horizon;
    let mut starts = Vec::new();
    for at in [n / 3, n / 2, (2 * n) / 3].into_iter().filter(|&l| l >= 1) {
        for i in 0..GRID {
            for j in 0..GRID {
                let t = Vec2::new(i as f64, j as f64) / (GRID - 1) as f64;
                let via = lo + (hi - lo).component_mul(&t);
                if let Some(u) = detour(inst, &aff, via, at) {
                    starts.push(angles_at(inst, &aff, &u));
                }
            }
        }
    }
    let mut local: Vec<(f64, Vec<Vec<f64>>)> =
        starts.into_iter().filter_map(|a| relinearise(inst, &aff, a)).collect();
    local.sort_by(|a, b| a.0.total_cmp(&b.0));
    local
        .into_iter()
        .take(3)
        .map(|(f, a)| coordinate_search(inst, &aff, f, a))
        .fold(f64::INFINITY, f64::min)
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    loop {
        let horizon = rng.random_range(5..=10);
        let dt = 0.2;
        let start = AgentState::new(
            Vec2::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
            Vec2::new(rng.random_range(0.2..0.8), rng.random_range(-0.3..0.3)),
        );
        let goal = AgentState::at_rest(rng.random_range(1.0..1.6), rng.random_range(-0.4..0.4));
        let count = rng.random_range(1..=2);
        let obstacles: Vec<(Vec2, f64)> = (0..count)
            .map(|_| {
                let s = rng.random_range(0.25..0.6);
                let c = start.position * (1.0 - s) + goal.position * s
                    + Vec2::new(0.0, rng.random_range(-0.15..0.15));
                (c, rng.random_range(0.12..0.25))
            })
            .collect();
        let clear = obstacles
            .iter()
            .all(|(c, r)| (start.position - c).norm() > r + 0.25 && (goal.position - c).norm() > r + 0.25);
        if clear {
            return Instance { dt, horizon, start, goal, obstacles };
        }
    }
}

/// Objective, convergence flag and KKT residual of each cold start that
/// succeeded: coasting, and the obstacle-free optimum.
fn run_sqp(inst: &Instance) -> Vec<(f64, bool, f64)> {
    let model = make_double_integrator(inst.dt).unwrap();
    let bounds = StateInputBounds { position: None, speed_cap: SPEED, accel_cap: ACCEL };
    let problem = TrajectoryProblem::new(model.clone(), inst.horizon, CostWeights::uniform(Q, R, P), bounds).unwrap();
    let reference = vec![inst.goal; inst.horizon + 1];
    let avoidance: Vec<AvoidanceConstraint> = inst
        .obstacles
        .iter()
        .flat_map(|(c, r)| (1..=inst.horizon).map(move |l| AvoidanceConstraint::new(l, *c, *r)))
        .collect();
    let options = SqpOptions::default();
    let coast = Trajectory::coasting(&model, inst.start, inst.horizon);
    let (free, _) = solve_sqp(&problem, &inst.start, &reference, &[], &coast, &options).unwrap();
    [coast, free]
        .iter()
        .filter_map(|seed| solve_sqp(&problem, &inst.start, &reference, &avoidance, seed, &options).ok())
        .map(|(traj, stats)| {
            let states: Vec<DVector<f64>> =
                traj.states.iter().map(|s| DVector::from_column_slice(s.to_vector().as_slice())).collect();
            let inputs = DVector::from_vec(TrajectoryProblem::stack_inputs(&traj));
            (objective_of(inst, &states, &inputs), stats.converged, stats.kkt_residual)
        })
        .collect()
}

/// Compare the SQP with the detour search on `count` random instances.
pub fn check(count: usize, seed: u64, objective_tol: f64, kkt_tol: f64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();
    for k in 0..count {
        let inst = random_instance(&mut rng);
        let expected = oracle(&inst);
        let runs = run_sqp(&inst);
        report.checked += 1;
        if runs.is_empty() {
            report.failures.push(format!("instance {k}: every cold start failed"));
            continue;
        }
        for &(_, converged, kkt) in &runs {
            if converged && kkt > kkt_tol {
                report.failures.push(format!("instance {k}: KKT residual {kkt:e}"));
            }
        }
        let got = runs.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
        let gap = got - expected;
        report.worst = report.worst.max(gap.abs());
        if gap.abs() > objective_tol {
            report.failures.push(format!("instance {k}: SQP {got:.6} vs oracle {expected:.6}"));
        }
    }
    report
}
