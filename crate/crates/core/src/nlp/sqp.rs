//! Sequential quadratic programming for horizon problems with keep-out
//! discs.
//!
//! The tracking objective is exactly quadratic in the stacked inputs, so
//! each subproblem keeps it unchanged and only linearises the keep-out
//! constraints. A disc constraint `|p - c| >= r` is replaced by the
//! half-plane `n'(p - c) >= r` for a unit vector `n`; the half-plane lies
//! outside the disc, so every subproblem solution satisfies the original
//! constraints. Once an iterate is feasible the objective can only go down.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector4};

use super::qp::{
    kkt_residual, solve_qp_with, HessianFactor, Multipliers, QpOptions, QpProblem, QpSolution,
};
use super::{AvoidanceConstraint, SolveStats, SolverError, TrajectoryProblem};
use crate::model::{AgentState, Trajectory, Vec2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqpOptions {
    pub max_iterations: usize,
    /// Converged when the accepted step is below this (infinity norm)...
    pub step_tol: f64,
    /// ...and no keep-out constraint is violated by more than this.
    pub violation_tol: f64,
    /// Infinity-norm cap on each subproblem step.
    pub trust_region: Option<f64>,
    pub qp: QpOptions,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            step_tol: 1e-5,
            violation_tol: 1e-6,
            trust_region: Some(1.0),
            qp: QpOptions::default(),
        }
    }
}

/// One agent of a (possibly joint) horizon problem.
#[derive(Debug, Clone, Copy)]
pub struct JointAgent<'a> {
    pub initial: AgentState,
    pub reference: &'a [AgentState],
    pub seed: &'a Trajectory,
    pub avoidance: &'a [AvoidanceConstraint],
}

/// Separation between two agents of a joint problem at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairConstraint {
    pub first: usize,
    pub second: usize,
    pub step: usize,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Linearization {
    /// Tangent half-plane at the nearest disc point. Iterates inside the
    /// disc are pushed sideways relative to their motion instead.
    Lateral,
    /// As `Lateral`, pushing interior iterates to the other side.
    Flipped,
    /// Interior iterates pushed to the left of their motion, whatever their
    /// offset. Keeps overlapping discs from pulling in opposite directions.
    Left,
    /// As `Left`, to the right.
    Right,
    /// Tangent half-plane along `p - c` everywhere.
    Radial,
}

/// Unit normal of the half-plane approximating `|offset| >= radius`.
///
/// Outside the disc this is the radial direction. Inside it, a radial push
/// splits a trajectory that crosses the disc into pieces pulled in opposite
/// directions, so the lateral component of the offset relative to the
/// relative velocity is used (all crossing points then move to the same
/// side). A zero offset with no relative motion falls back to `(1, 0)`.
pub fn linearization_normal(offset: Vec2, relative_velocity: Vec2, radius: f64) -> Vec2 {
    lin_normal(offset, relative_velocity, radius, Linearization::Lateral)
}

fn lin_normal(offset: Vec2, rel_vel: Vec2, radius: f64, mode: Linearization) -> Vec2 {
    let dist = offset.norm();
    let fallback = || {
        if dist > 1e-12 {
            offset / dist
        } else {
            Vec2::new(1.0, 0.0)
        }
    };
    if dist >= radius || mode == Linearization::Radial {
        return fallback();
    }
    let speed = rel_vel.norm();
    if speed <= 1e-9 {
        return fallback();
    }
    let dir = rel_vel / speed;
    let left = Vec2::new(-dir.y, dir.x);
    match mode {
        Linearization::Left => return left,
        Linearization::Right => return -left,
        _ => {}
    }
    let lateral = offset - dir * offset.dot(&dir);
    let lat = lateral.norm();
    let normal = if lat > 1e-9 {
        lateral / lat
    } else {
        left
    };
    if mode == Linearization::Flipped {
        -normal
    } else {
        normal
    }
}

/// Rules for iterates inside a disc, tried stage by stage until one
/// succeeds. Within a stage the lowest objective wins.
const INTERIOR_RULES: [&[Linearization]; 4] = [
    &[Linearization::Lateral],
    &[Linearization::Flipped],
    &[Linearization::Left, Linearization::Right],
    &[Linearization::Radial],
];

#[derive(Debug, Clone, Copy)]
enum KeepOut {
    Fixed { agent: usize, c: AvoidanceConstraint },
    Pair(PairConstraint),
}

impl KeepOut {
    fn step(&self) -> usize {
        match self {
            KeepOut::Fixed { c, .. } => c.step,
            KeepOut::Pair(p) => p.step,
        }
    }

    fn radius(&self) -> f64 {
        match self {
            KeepOut::Fixed { c, .. } => c.radius,
            KeepOut::Pair(p) => p.radius,
        }
    }
}

/// Solve a single-agent horizon problem.
pub fn solve_sqp(
    problem: &TrajectoryProblem,
    initial: &AgentState,
    reference: &[AgentState],
    avoidance: &[AvoidanceConstraint],
    seed: &Trajectory,
    options: &SqpOptions,
) -> Result<(Trajectory, SolveStats), SolverError> {
    let agent = JointAgent {
        initial: *initial,
        reference,
        seed,
        avoidance,
    };
    let (mut trajs, stats) = solve_sqp_joint(problem, &[agent], &[], options)?;
    Ok((trajs.remove(0), stats))
}

/// Solve one problem over the stacked inputs of several agents sharing the
/// same dynamics, weights and bounds, coupled by pairwise separation.
pub fn solve_sqp_joint(
    problem: &TrajectoryProblem,
    agents: &[JointAgent<'_>],
    pairs: &[PairConstraint],
    options: &SqpOptions,
) -> Result<(Vec<Trajectory>, SolveStats), SolverError> {
    let started = Instant::now();
    let engine = Engine::new(problem, agents, pairs, options)?;
    let mut iterations = 0;
    let mut best: Option<Outcome> = None;
    'stages: for stage in INTERIOR_RULES {
        for &rule in stage {
            match engine.run(rule) {
                Ok(o) => {
                    iterations += o.stats.iterations;
                    if best.as_ref().is_none_or(|b| o.stats.objective < b.stats.objective) {
                        best = Some(o);
                    }
                }
                Err(SolverError::Infeasible) if engine.seed_violation() > 0.0 => {
                    iterations += options.max_iterations;
                }
                Err(e) => return Err(e),
            }
        }
        if best.is_some() {
            break 'stages;
        }
    }
    let Outcome { z, mut stats, .. } = best.ok_or(SolverError::Infeasible)?;
    stats.iterations = iterations;
    let nu = problem.num_inputs();
    let trajs = agents
        .iter()
        .enumerate()
        .map(|(a, ag)| problem.rollout(&ag.initial, &z.as_slice()[a * nu..(a + 1) * nu]))
        .collect();
    stats.wall_time = started.elapsed().as_secs_f64();
    Ok((trajs, stats))
}

struct Engine<'a> {
    problem: &'a TrajectoryProblem,
    options: &'a SqpOptions,
    agents: &'a [JointAgent<'a>],
    nu: usize,
    n: usize,
    free: Vec<Vec<Vector4<f64>>>,
    gradient: DVector<f64>,
    constant: f64,
    hessian: DMatrix<f64>,
    factor: HessianFactor,
    bound_matrix: DMatrix<f64>,
    bound_rhs: DVector<f64>,
    keep_outs: Vec<KeepOut>,
}

impl<'a> Engine<'a> {
    fn new(
        problem: &'a TrajectoryProblem,
        agents: &'a [JointAgent<'a>],
        pairs: &[PairConstraint],
        options: &'a SqpOptions,
    ) -> Result<Self, SolverError> {
        let na = agents.len();
        if na == 0 {
            return Err(SolverError::InvalidProblem("no agents".into()));
        }
        let nu = problem.num_inputs();
        let horizon = problem.horizon();
        let n = nu * na;
        for ag in agents {
            if ag.reference.len() != horizon + 1 || ag.seed.horizon() != horizon {
                return Err(SolverError::InvalidProblem(
                    "reference and seed must match the horizon".into(),
                ));
            }
            if !ag.initial.is_finite() {
                return Err(SolverError::InvalidProblem("non-finite initial state".into()));
            }
        }

        let mut gradient = DVector::zeros(n);
        let mut constant = 0.0;
        let mut free = Vec::with_capacity(na);
        let mb = problem.bound_matrix().nrows();
        let mut bound_matrix = DMatrix::zeros(mb * na, n);
        let mut bound_rhs = DVector::zeros(mb * na);
        for (a, ag) in agents.iter().enumerate() {
            let (g, c) = problem.linear_term(&ag.initial, ag.reference);
            gradient.rows_mut(a * nu, nu).copy_from(&g);
            constant += c;
            free.push(problem.prediction().free_response(&ag.initial));
            bound_matrix
                .view_mut((a * mb, a * nu), (mb, nu))
                .copy_from(problem.bound_matrix());
            bound_rhs
                .rows_mut(a * mb, mb)
                .copy_from(&problem.bound_rhs(&ag.initial));
        }
        let (hessian, factor) = if na == 1 {
            (problem.hessian().clone(), problem.factor().clone())
        } else {
            let mut h = DMatrix::zeros(n, n);
            for a in 0..na {
                h.view_mut((a * nu, a * nu), (nu, nu)).copy_from(problem.hessian());
            }
            (h, problem.factor().block_diagonal(na))
        };

        let mut keep_outs = Vec::new();
        let mut engine_fixed = |ko: KeepOut| keep_outs.push(ko);
        for (a, ag) in agents.iter().enumerate() {
            for c in ag.avoidance {
                if c.step > horizon || c.radius.is_nan() || c.radius <= 0.0 {
                    return Err(SolverError::InvalidProblem("bad avoidance constraint".into()));
                }
                engine_fixed(KeepOut::Fixed { agent: a, c: *c });
            }
        }
        for p in pairs {
            if p.first >= na || p.second >= na || p.first == p.second || p.step > horizon {
                return Err(SolverError::InvalidProblem("bad pair constraint".into()));
            }
            engine_fixed(KeepOut::Pair(*p));
        }

        let mut engine = Self {
            problem,
            options,
            agents,
            nu,
            n,
            free,
            gradient,
            constant,
            hessian,
            factor,
            bound_matrix,
            bound_rhs,
            keep_outs: Vec::new(),
        };
        // step-0 positions are fixed by the initial states
        let zero = DVector::zeros(n);
        for ko in keep_outs {
            if ko.step() == 0 {
                if engine.distance(&zero, &ko) < ko.radius() - options.violation_tol {
                    return Err(SolverError::Infeasible);
                }
            } else {
                engine.keep_outs.push(ko);
            }
        }
        Ok(engine)
    }

    fn state(&self, z: &DVector<f64>, agent: usize, step: usize) -> Vector4<f64> {
        let u = &z.as_slice()[agent * self.nu..(agent + 1) * self.nu];
        self.problem.prediction().state(&self.free[agent], u, step)
    }

    /// Offset and relative velocity of a keep-out at `z`.
    fn relative(&self, z: &DVector<f64>, ko: &KeepOut) -> (Vec2, Vec2) {
        match ko {
            KeepOut::Fixed { agent, c } => {
                let x = self.state(z, *agent, c.step);
                (
                    Vec2::new(x[0], x[1]) - c.center,
                    Vec2::new(x[2], x[3]) - c.center_velocity,
                )
            }
            KeepOut::Pair(p) => {
                let a = self.state(z, p.first, p.step);
                let b = self.state(z, p.second, p.step);
                (
                    Vec2::new(a[0] - b[0], a[1] - b[1]),
                    Vec2::new(a[2] - b[2], a[3] - b[3]),
                )
            }
        }
    }

    fn distance(&self, z: &DVector<f64>, ko: &KeepOut) -> f64 {
        self.relative(z, ko).0.norm()
    }

    fn violation(&self, z: &DVector<f64>) -> (f64, f64) {
        self.keep_outs.iter().fold((0.0, 0.0), |(sum, max), ko| {
            let v = (ko.radius() - self.distance(z, ko)).max(0.0);
            (sum + v, f64::max(max, v))
        })
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.gradient.dot(z) + self.constant
    }

    fn merit(&self, z: &DVector<f64>, penalty: f64) -> f64 {
        self.objective(z) + penalty * self.violation(z).0
    }

    fn keep_out_rows(&self, z: &DVector<f64>, mode: Linearization) -> (DMatrix<f64>, DVector<f64>) {
        let k = self.keep_outs.len();
        let mut rows = DMatrix::zeros(k, self.n);
        let mut rhs = DVector::zeros(k);
        let pred = self.problem.prediction();
        for (i, ko) in self.keep_outs.iter().enumerate() {
            let (offset, rel_vel) = self.relative(z, ko);
            let normal = lin_normal(offset, rel_vel, ko.radius(), mode);
            let l = ko.step();
            let g = pred.gamma(l);
            // n' Gamma_pos restricted to the first 2l inputs
            let mut write = |agent: usize, sign: f64| {
                for j in 0..2 * l {
                    rows[(i, agent * self.nu + j)] +=
                        sign * (normal.x * g[(0, j)] + normal.y * g[(1, j)]);
                }
            };
            match ko {
                KeepOut::Fixed { agent, c } => {
                    write(*agent, 1.0);
                    let f = self.free[*agent][l];
                    rhs[i] = c.radius + normal.dot(&c.center) - normal.dot(&Vec2::new(f[0], f[1]));
                }
                KeepOut::Pair(p) => {
                    write(p.first, 1.0);
                    write(p.second, -1.0);
                    let fa = self.free[p.first][l];
                    let fb = self.free[p.second][l];
                    rhs[i] = p.radius - normal.dot(&Vec2::new(fa[0] - fb[0], fa[1] - fb[1]));
                }
            }
        }
        (rows, rhs)
    }

    /// Subproblem at `z`. With `elastic = Some(weight)` every keep-out row
    /// gets its own slack, penalised linearly by `weight`, so the QP is
    /// feasible whenever the state bounds are.
    fn subproblem(
        &self,
        z: &DVector<f64>,
        rows: &DMatrix<f64>,
        rhs: &DVector<f64>,
        trust_region: Option<f64>,
        elastic: Option<f64>,
    ) -> QpProblem {
        let mb = self.bound_matrix.nrows();
        let k = rows.nrows();
        let ns = if elastic.is_some() { k } else { 0 };
        let dim = self.n + ns;
        let mut ineq = DMatrix::zeros(mb + k, dim);
        ineq.view_mut((0, 0), (mb, self.n)).copy_from(&self.bound_matrix);
        ineq.view_mut((mb, 0), (k, self.n)).copy_from(rows);
        for i in 0..ns {
            ineq[(mb + i, self.n + i)] = 1.0;
        }
        let mut lower_rhs = DVector::zeros(mb + k);
        lower_rhs.rows_mut(0, mb).copy_from(&self.bound_rhs);
        lower_rhs.rows_mut(mb, k).copy_from(rhs);

        let (lo, hi) = self.problem.input_bounds();
        let mut lower = DVector::from_element(dim, lo);
        let mut upper = DVector::from_element(dim, hi);
        if let Some(delta) = trust_region {
            for i in 0..self.n {
                lower[i] = lower[i].max(z[i] - delta);
                upper[i] = upper[i].min(z[i] + delta);
            }
        }
        let mut hessian = DMatrix::zeros(dim, dim);
        hessian.view_mut((0, 0), (self.n, self.n)).copy_from(&self.hessian);
        let mut gradient = DVector::zeros(dim);
        gradient.rows_mut(0, self.n).copy_from(&self.gradient);
        if let Some(weight) = elastic {
            for i in self.n..dim {
                hessian[(i, i)] = ELASTIC_CURVATURE;
                gradient[i] = weight;
                lower[i] = 0.0;
                upper[i] = f64::INFINITY;
            }
        }
        QpProblem {
            hessian,
            gradient,
            eq_matrix: DMatrix::zeros(0, dim),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: ineq,
            ineq_lower: lower_rhs,
            lower,
            upper,
        }
    }

    /// Solve the linearised subproblem at `z`. When it is infeasible, the
    /// trust region is dropped, then the radial rule is tried, and finally an
    /// elastic subproblem moves the iterate towards feasibility.
    fn solve_subproblem(&self, z: &DVector<f64>, interior: Linearization) -> Result<Subproblem, SolverError> {
        let inside = self.violation(z).1 > 0.0;
        let modes: &[Linearization] = if inside && interior != Linearization::Radial {
            &[interior, Linearization::Radial]
        } else {
            &[Linearization::Radial]
        };
        let regions: Vec<Option<f64>> = match self.options.trust_region {
            Some(d) => vec![Some(d), None],
            None => vec![None],
        };
        for &mode in modes {
            let (rows, rhs) = self.keep_out_rows(z, mode);
            for &tr in &regions {
                let qp = self.subproblem(z, &rows, &rhs, tr, None);
                match solve_qp_with(&qp, &self.factor, &self.options.qp) {
                    Ok(sol) => {
                        return Ok(Subproblem {
                            x: sol.x.clone(),
                            solution: sol,
                        })
                    }
                    Err(SolverError::Infeasible) => continue,
                    Err(e) => return Err(e),
                }
            }
        }
        if !inside {
            return Err(SolverError::Infeasible);
        }
        let (rows, rhs) = self.keep_out_rows(z, interior);
        let weight = ELASTIC_WEIGHT * self.hessian.diagonal().amax().max(1.0);
        let qp = self.subproblem(z, &rows, &rhs, None, Some(weight));
        let factor = self
            .factor
            .with_diagonal(&vec![ELASTIC_CURVATURE; rows.nrows()]);
        let sol = solve_qp_with(&qp, &factor, &self.options.qp)?;
        Ok(Subproblem {
            x: sol.x.rows(0, self.n).into_owned(),
            solution: sol,
        })
    }

    fn initial_point(&self) -> DVector<f64> {
        let (lo, hi) = self.problem.input_bounds();
        let mut z = DVector::zeros(self.n);
        for (a, ag) in self.agents.iter().enumerate() {
            for (k, v) in TrajectoryProblem::stack_inputs(ag.seed).into_iter().enumerate() {
                z[a * self.nu + k] = if v.is_finite() { v.clamp(lo, hi) } else { 0.0 };
            }
        }
        z
    }

    fn seed_violation(&self) -> f64 {
        self.violation(&self.initial_point()).1
    }

    fn run(&self, interior: Linearization) -> Result<Outcome, SolverError> {
        let opts = self.options;
        let mut z = self.initial_point();
        let mut stats = SolveStats::default();
        let mut merits = Vec::new();

        if self.keep_outs.is_empty() {
            // the objective is exactly quadratic: one subproblem is the answer
            let qp = self.subproblem(&z, &DMatrix::zeros(0, self.n), &DVector::zeros(0), None, None);
            let sol = solve_qp_with(&qp, &self.factor, &opts.qp)?;
            stats.iterations = 1;
            stats.converged = true;
            stats.active_constraints = sol.stats.active_constraints;
            stats.kkt_residual = sol.stats.kkt_residual;
            stats.objective = self.objective(&sol.x);
            return Ok(Outcome { z: sol.x, stats, merits });
        }

        let mb = self.bound_matrix.nrows();
        let k = self.keep_outs.len();
        let mut penalty = 1.0;
        let mut stalled = 0;
        for _ in 0..opts.max_iterations {
            stats.iterations += 1;
            let sub = self.solve_subproblem(&z, interior)?;
            let d = &sub.x - &z;
            let lambda_max = sub.solution.multipliers.ineq.rows(mb, k).max().max(0.0);
            penalty = f64::max(penalty, 2.0 * lambda_max + 1.0);

            let merit0 = self.merit(&z, penalty);
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..20 {
                let trial = &z + alpha * &d;
                let m = self.merit(&trial, penalty);
                if m <= merit0 {
                    accepted = Some((trial, m));
                    break;
                }
                alpha *= 0.5;
            }
            let step = alpha * d.amax();
            let violation_before = self.violation(&z).0;
            match accepted {
                Some((next, m)) => {
                    z = next;
                    merits.push((merit0, m));
                }
                None => {
                    // no decrease possible: either already stationary or stalled
                    stats.converged =
                        d.amax() < opts.step_tol && self.violation(&z).1 < opts.violation_tol;
                    break;
                }
            }
            let (violation_sum, violation_max) = self.violation(&z);
            if step < opts.step_tol && violation_max < opts.violation_tol {
                stats.converged = true;
                break;
            }
            if violation_max > opts.violation_tol {
                stalled = if violation_sum > 0.99 * violation_before {
                    stalled + 1
                } else {
                    0
                };
                if stalled >= STALL_LIMIT {
                    return Err(SolverError::Infeasible);
                }
            }
        }

        if self.violation(&z).1 > opts.violation_tol {
            return Err(SolverError::Infeasible);
        }

        let (z, kkt, active) = self.polish(z);
        stats.kkt_residual = kkt;
        stats.active_constraints = active;
        stats.objective = self.objective(&z);
        Ok(Outcome { z, stats, merits })
    }

    /// Jacobian of a keep-out's offset with respect to the stacked inputs.
    fn offset_jacobian(&self, ko: &KeepOut) -> DMatrix<f64> {
        let l = ko.step();
        let g = self.problem.prediction().gamma(l);
        let mut jac = DMatrix::zeros(2, self.n);
        let mut write = |agent: usize, sign: f64| {
            for j in 0..2 * l {
                jac[(0, agent * self.nu + j)] += sign * g[(0, j)];
                jac[(1, agent * self.nu + j)] += sign * g[(1, j)];
            }
        };
        match ko {
            KeepOut::Fixed { agent, .. } => write(*agent, 1.0),
            KeepOut::Pair(p) => {
                write(p.first, 1.0);
                write(p.second, -1.0);
            }
        }
        jac
    }

    /// First-order optimality residual of the original problem at `z`.
    /// Radial rows at `z` carry the exact constraint gradients, and their
    /// slack equals the true clearance.
    fn kkt_at(&self, z: &DVector<f64>, multipliers: &Multipliers) -> f64 {
        let (rows, rhs) = self.keep_out_rows(z, Linearization::Radial);
        let qp = self.subproblem(z, &rows, &rhs, None, None);
        kkt_residual(&qp, z, multipliers)
    }

    /// Refine a converged iterate with Newton steps on the KKT system of the
    /// active set, using the exact curvature of the keep-out constraints.
    /// Returns the better of the refined and the original point together
    /// with its residual and active-set size.
    fn polish(&self, z: DVector<f64>) -> (DVector<f64>, f64, usize) {
        let (rows, rhs) = self.keep_out_rows(&z, Linearization::Radial);
        let qp = self.subproblem(&z, &rows, &rhs, None, None);
        let Ok(sol) = solve_qp_with(&qp, &self.factor, &self.options.qp) else {
            let empty = Multipliers {
                eq: DVector::zeros(0),
                ineq: DVector::zeros(qp.ineq_matrix.nrows()),
                lower: DVector::zeros(self.n),
                upper: DVector::zeros(self.n),
            };
            let kkt = self.kkt_at(&z, &empty);
            return (z, kkt, 0);
        };
        let base_kkt = self.kkt_at(&z, &sol.multipliers);
        let base_active = sol.stats.active_constraints;

        let mb = self.bound_matrix.nrows();
        let active: Vec<usize> = (0..sol.multipliers.ineq.len())
            .filter(|&r| sol.multipliers.ineq[r] > 0.0)
            .collect();
        let (lo, hi) = self.problem.input_bounds();
        let fixed: Vec<Option<f64>> = (0..self.n)
            .map(|i| {
                if sol.multipliers.lower[i] > 0.0 {
                    Some(lo)
                } else if sol.multipliers.upper[i] > 0.0 {
                    Some(hi)
                } else {
                    None
                }
            })
            .collect();
        let free: Vec<usize> = (0..self.n).filter(|&i| fixed[i].is_none()).collect();
        let (nf, na) = (free.len(), active.len());

        let mut u = z.clone();
        for (i, f) in fixed.iter().enumerate() {
            if let Some(b) = f {
                u[i] = *b;
            }
        }
        let mut lambda = DVector::from_iterator(na, active.iter().map(|&r| sol.multipliers.ineq[r]));
        let mut rows_all = DMatrix::zeros(mb + rows.nrows(), self.n);
        let mut rhs_all = DVector::zeros(mb + rows.nrows());
        rows_all.rows_mut(0, mb).copy_from(&self.bound_matrix);
        rhs_all.rows_mut(0, mb).copy_from(&self.bound_rhs);
        for _ in 0..POLISH_ITERATIONS {
            let (krows, krhs) = self.keep_out_rows(&u, Linearization::Radial);
            rows_all.rows_mut(mb, krows.nrows()).copy_from(&krows);
            rhs_all.rows_mut(mb, krows.nrows()).copy_from(&krhs);
            let grad = &self.hessian * &u + &self.gradient;
            let mut w = self.hessian.clone();
            for (a, &r) in active.iter().enumerate() {
                if r < mb {
                    continue;
                }
                let ko = &self.keep_outs[r - mb];
                let offset = self.relative(&u, ko).0;
                let d = offset.norm();
                if d < 1e-9 {
                    return (z, base_kkt, base_active);
                }
                let normal = offset / d;
                let proj = (nalgebra::Matrix2::identity() - normal * normal.transpose()) / d;
                let jac = self.offset_jacobian(ko);
                w -= lambda[a] * jac.transpose() * proj * jac;
            }
            let mut kkt = DMatrix::zeros(nf + na, nf + na);
            let mut b = DVector::zeros(nf + na);
            for (p, &i) in free.iter().enumerate() {
                for (q, &j) in free.iter().enumerate() {
                    kkt[(p, q)] = w[(i, j)];
                }
                for (a, &r) in active.iter().enumerate() {
                    kkt[(p, nf + a)] = -rows_all[(r, i)];
                    kkt[(nf + a, p)] = rows_all[(r, i)];
                }
                b[p] = -grad[i];
            }
            for (a, &r) in active.iter().enumerate() {
                b[nf + a] = rhs_all[r] - rows_all.row(r).dot(&u.transpose());
            }
            let Some(step) = kkt.lu().solve(&b) else {
                return (z, base_kkt, base_active);
            };
            let mut du_max: f64 = 0.0;
            for (p, &i) in free.iter().enumerate() {
                u[i] += step[p];
                du_max = du_max.max(step[p].abs());
            }
            lambda.copy_from(&step.rows(nf, na));
            if du_max <= 1e-14 * u.amax().max(1.0) {
                break;
            }
        }

        let (krows, _) = self.keep_out_rows(&u, Linearization::Radial);
        rows_all.rows_mut(mb, krows.nrows()).copy_from(&krows);
        let mut ineq = DVector::zeros(rows_all.nrows());
        for (a, &r) in active.iter().enumerate() {
            ineq[r] = lambda[a];
        }
        let reduced = &self.hessian * &u + &self.gradient - rows_all.tr_mul(&ineq);
        let mut lower = DVector::zeros(self.n);
        let mut upper = DVector::zeros(self.n);
        for (i, f) in fixed.iter().enumerate() {
            match f {
                Some(v) if *v == lo => lower[i] = reduced[i],
                Some(_) => upper[i] = -reduced[i],
                None => {}
            }
        }
        let multipliers = Multipliers {
            eq: DVector::zeros(0),
            ineq,
            lower,
            upper,
        };
        let in_box = u.iter().all(|v| *v >= lo && *v <= hi);
        let kkt = self.kkt_at(&u, &multipliers);
        if in_box
            && u.iter().all(|v| v.is_finite())
            && self.violation(&u).1 <= self.options.violation_tol
            && kkt < base_kkt
        {
            (u, kkt, na + fixed.iter().filter(|f| f.is_some()).count())
        } else {
            (z, base_kkt, base_active)
        }
    }
}

const POLISH_ITERATIONS: usize = 6;

/// Linear slack penalty of the elastic subproblem, relative to the largest
/// Hessian diagonal entry.
const ELASTIC_WEIGHT: f64 = 1e3;
/// Small curvature on the slacks keeps the elastic Hessian positive definite.
const ELASTIC_CURVATURE: f64 = 1e-6;
/// Consecutive infeasible iterations without 1% violation decrease before
/// giving up.
const STALL_LIMIT: usize = 4;

struct Subproblem {
    /// Step target in the original variables.
    x: DVector<f64>,
    solution: QpSolution,
}

struct Outcome {
    z: DVector<f64>,
    stats: SolveStats,
    /// Merit before and after every accepted step, at that step's penalty.
    #[cfg_attr(not(test), allow(dead_code))]
    merits: Vec<(f64, f64)>,
}
