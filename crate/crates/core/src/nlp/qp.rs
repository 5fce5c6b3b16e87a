//! Dense convex QP solver using the dual active-set method of Goldfarb and
//! Idnani.
//!
//! ```text
//!     minimize    1/2 x' H x + g' x
//!     subject to  E x  = e
//!                 C x >= c
//!                 lower <= x <= upper
//! ```
//!
//! The method starts from the unconstrained minimiser and adds violated
//! constraints one at a time while keeping the iterate optimal for the
//! current active set. It needs no feasible starting point, and reports
//! infeasibility when a violated constraint cannot be satisfied.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};

use super::{SolveStats, SolverError};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    /// Rows of `E`, one equality per row.
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    /// Rows of `C`, one inequality `C_i x >= c_i` per row.
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_lower: DVector<f64>,
    /// Variable bounds; use infinities for free variables.
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    pub fn unconstrained(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_lower: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_equalities(mut self, matrix: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.eq_matrix = matrix;
        self.eq_rhs = rhs;
        self
    }

    pub fn with_inequalities(mut self, matrix: DMatrix<f64>, lower: DVector<f64>) -> Self {
        self.ineq_matrix = matrix;
        self.ineq_lower = lower;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let n = self.dim();
        let bad = |what: &str| Err(SolverError::InvalidProblem(what.to_string()));
        if self.hessian.shape() != (n, n) {
            return bad("hessian shape does not match gradient");
        }
        if self.eq_matrix.ncols() != n || self.eq_matrix.nrows() != self.eq_rhs.len() {
            return bad("equality block has inconsistent dimensions");
        }
        if self.ineq_matrix.ncols() != n || self.ineq_matrix.nrows() != self.ineq_lower.len() {
            return bad("inequality block has inconsistent dimensions");
        }
        if self.lower.len() != n || self.upper.len() != n {
            return bad("bound vectors have wrong length");
        }
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > 1e-10 * self.hessian.amax().max(1.0) {
            return bad("hessian is not symmetric");
        }
        if self.lower.iter().zip(self.upper.iter()).any(|(l, u)| l > u) {
            return bad("lower bound exceeds upper bound");
        }
        Ok(())
    }

    /// Largest violation of any constraint at `x`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let eq = (&self.eq_matrix * x - &self.eq_rhs).amax();
        let ineq = (&self.ineq_lower - &self.ineq_matrix * x).max().max(0.0);
        let bounds = (0..x.len())
            .map(|i| (self.lower[i] - x[i]).max(x[i] - self.upper[i]))
            .fold(0.0, f64::max);
        eq.max(ineq).max(bounds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QpOptions {
    pub max_iterations: usize,
    /// A constraint counts as violated when its slack is below `-feasibility_tol`.
    pub feasibility_tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            feasibility_tol: 1e-9,
        }
    }
}

/// Lagrange multipliers at the solution. Inequality and bound multipliers
/// are non-negative; equality multipliers are free.
#[derive(Debug, Clone)]
pub struct Multipliers {
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub multipliers: Multipliers,
    pub stats: SolveStats,
}

/// Inverse Cholesky factor `J = L^{-T}` of the Hessian, reusable across
/// problems sharing a Hessian.
#[derive(Debug, Clone)]
pub struct HessianFactor {
    j: DMatrix<f64>,
    /// Diagonal shift applied when the Hessian is only semidefinite.
    regularization: f64,
}

impl HessianFactor {
    pub fn new(hessian: &DMatrix<f64>) -> Result<Self, SolverError> {
        let n = hessian.nrows();
        let scale = hessian.diagonal().amax().max(1.0);
        let mut shift = 0.0;
        for _ in 0..8 {
            let mut h = hessian.clone();
            for i in 0..n {
                h[(i, i)] += shift;
            }
            if let Some(chol) = Cholesky::new(h) {
                let l = chol.l();
                let linv = l
                    .solve_lower_triangular(&DMatrix::identity(n, n))
                    .ok_or(SolverError::NotConvex)?;
                return Ok(Self {
                    j: linv.transpose(),
                    regularization: shift,
                });
            }
            shift = if shift == 0.0 { 1e-10 * scale } else { shift * 100.0 };
        }
        Err(SolverError::NotConvex)
    }

    /// Factor of a block-diagonal Hessian built from `blocks` copies.
    pub fn block_diagonal(&self, blocks: usize) -> Self {
        let n = self.j.nrows();
        let mut j = DMatrix::zeros(n * blocks, n * blocks);
        for b in 0..blocks {
            j.view_mut((b * n, b * n), (n, n)).copy_from(&self.j);
        }
        Self {
            j,
            regularization: self.regularization,
        }
    }

    /// Factor of `diag(H, D)` for a positive diagonal `D`.
    pub fn with_diagonal(&self, diagonal: &[f64]) -> Self {
        let n = self.j.nrows();
        let k = diagonal.len();
        let mut j = DMatrix::zeros(n + k, n + k);
        j.view_mut((0, 0), (n, n)).copy_from(&self.j);
        for (i, d) in diagonal.iter().enumerate() {
            j[(n + i, n + i)] = 1.0 / d.sqrt();
        }
        Self {
            j,
            regularization: self.regularization,
        }
    }

    pub fn dim(&self) -> usize {
        self.j.nrows()
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }
}

pub fn solve_qp(qp: &QpProblem) -> Result<QpSolution, SolverError> {
    qp.validate()?;
    let factor = HessianFactor::new(&qp.hessian)?;
    solve_qp_with(qp, &factor, &QpOptions::default())
}

/// Solve using a precomputed Hessian factor. `factor` must belong to
/// `qp.hessian`.
pub fn solve_qp_with(
    qp: &QpProblem,
    factor: &HessianFactor,
    options: &QpOptions,
) -> Result<QpSolution, SolverError> {
    let started = Instant::now();
    if factor.dim() != qp.dim() {
        return Err(SolverError::InvalidProblem(
            "factor dimension does not match problem".into(),
        ));
    }
    let mut solver = DualActiveSet::new(qp, factor, options);
    solver.run()?;
    let mut solution = solver.finish();
    solution.stats.wall_time = started.elapsed().as_secs_f64();
    Ok(solution)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Con {
    /// Equality row with orientation `sign * E_k x >= sign * e_k`.
    Eq(usize, bool),
    Ineq(usize),
    Lower(usize),
    Upper(usize),
}

struct DualActiveSet<'a> {
    qp: &'a QpProblem,
    options: &'a QpOptions,
    n: usize,
    /// Transposed inequality rows: one constraint normal per column.
    ct: DMatrix<f64>,
    et: DMatrix<f64>,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    active: Vec<Con>,
    u: Vec<f64>,
    x: DVector<f64>,
    iterations: usize,
    is_active_ineq: Vec<bool>,
    is_active_lower: Vec<bool>,
    is_active_upper: Vec<bool>,
}

impl<'a> DualActiveSet<'a> {
    fn new(qp: &'a QpProblem, factor: &HessianFactor, options: &'a QpOptions) -> Self {
        let n = qp.dim();
        let j = factor.j.clone();
        // unconstrained minimiser -J J' g
        let x = -(&j * (j.transpose() * &qp.gradient));
        Self {
            qp,
            options,
            n,
            ct: qp.ineq_matrix.transpose(),
            et: qp.eq_matrix.transpose(),
            j,
            r: DMatrix::zeros(n, n),
            active: Vec::new(),
            u: Vec::new(),
            x,
            iterations: 0,
            is_active_ineq: vec![false; qp.ineq_lower.len()],
            is_active_lower: vec![false; n],
            is_active_upper: vec![false; n],
        }
    }

    fn q(&self) -> usize {
        self.active.len()
    }

    fn normal(&self, c: Con) -> DVector<f64> {
        match c {
            Con::Eq(k, up) => {
                let col = self.et.column(k).into_owned();
                if up {
                    col
                } else {
                    -col
                }
            }
            Con::Ineq(k) => self.ct.column(k).into_owned(),
            Con::Lower(i) => {
                let mut v = DVector::zeros(self.n);
                v[i] = 1.0;
                v
            }
            Con::Upper(i) => {
                let mut v = DVector::zeros(self.n);
                v[i] = -1.0;
                v
            }
        }
    }

    fn rhs(&self, c: Con) -> f64 {
        match c {
            Con::Eq(k, up) => {
                if up {
                    self.qp.eq_rhs[k]
                } else {
                    -self.qp.eq_rhs[k]
                }
            }
            Con::Ineq(k) => self.qp.ineq_lower[k],
            Con::Lower(i) => self.qp.lower[i],
            Con::Upper(i) => -self.qp.upper[i],
        }
    }

    fn slack(&self, c: Con) -> f64 {
        match c {
            Con::Lower(i) => self.x[i] - self.qp.lower[i],
            Con::Upper(i) => self.qp.upper[i] - self.x[i],
            _ => self.normal(c).dot(&self.x) - self.rhs(c),
        }
    }

    /// `J' n` without forming unit normals explicitly.
    fn project(&self, c: Con) -> DVector<f64> {
        match c {
            Con::Lower(i) => self.j.row(i).transpose(),
            Con::Upper(i) => -self.j.row(i).transpose(),
            _ => self.j.tr_mul(&self.normal(c)),
        }
    }

    fn set_active_flag(&mut self, c: Con, value: bool) {
        match c {
            Con::Ineq(k) => self.is_active_ineq[k] = value,
            Con::Lower(i) => self.is_active_lower[i] = value,
            Con::Upper(i) => self.is_active_upper[i] = value,
            Con::Eq(..) => {}
        }
    }

    /// Most violated inactive inequality or bound, if any.
    fn most_violated(&self) -> Option<Con> {
        let tol = self.options.feasibility_tol;
        let mut worst: Option<(f64, Con)> = None;
        let mut consider = |s: f64, c: Con| {
            if s < -tol && worst.is_none_or(|(w, _)| s < w) {
                worst = Some((s, c));
            }
        };
        if !self.is_active_ineq.is_empty() {
            let slacks = self.ct.tr_mul(&self.x) - &self.qp.ineq_lower;
            for (k, s) in slacks.iter().enumerate() {
                if !self.is_active_ineq[k] {
                    consider(*s, Con::Ineq(k));
                }
            }
        }
        for i in 0..self.n {
            if !self.is_active_lower[i] && self.qp.lower[i].is_finite() {
                consider(self.x[i] - self.qp.lower[i], Con::Lower(i));
            }
            if !self.is_active_upper[i] && self.qp.upper[i].is_finite() {
                consider(self.qp.upper[i] - self.x[i], Con::Upper(i));
            }
        }
        worst.map(|(_, c)| c)
    }

    fn run(&mut self) -> Result<(), SolverError> {
        for k in 0..self.qp.eq_rhs.len() {
            let s = self.et.column(k).dot(&self.x) - self.qp.eq_rhs[k];
            self.enforce(Con::Eq(k, s <= 0.0), true)?;
        }
        while let Some(p) = self.most_violated() {
            self.enforce(p, false)?;
        }
        Ok(())
    }

    /// Bring constraint `p` into the active set, dropping blocking
    /// constraints along the way.
    fn enforce(&mut self, p: Con, equality: bool) -> Result<(), SolverError> {
        let mut u_plus = 0.0;
        loop {
            self.iterations += 1;
            if self.iterations > self.options.max_iterations {
                return Err(SolverError::MaxIterations);
            }
            let q = self.q();
            let d = self.project(p);
            let d2_norm = d.rows(q, self.n - q).norm();
            let z = if d2_norm > 1e-12 * d.norm().max(1.0) {
                Some(self.j.columns(q, self.n - q) * d.rows(q, self.n - q))
            } else {
                None
            };
            let r = self.back_substitute(&d);

            // largest dual step keeping active inequality multipliers >= 0
            let mut t1 = f64::INFINITY;
            let mut blocking = None;
            for (idx, c) in self.active.iter().enumerate() {
                if matches!(c, Con::Eq(..)) || r[idx] <= 0.0 {
                    continue;
                }
                let ratio = self.u[idx] / r[idx];
                if ratio < t1 {
                    t1 = ratio;
                    blocking = Some(idx);
                }
            }

            let slack = self.slack(p);
            let Some(z) = z else {
                // normal lies in the span of the active normals
                if equality {
                    if slack.abs() <= self.options.feasibility_tol.max(1e-9) {
                        return Ok(());
                    }
                    return Err(SolverError::Infeasible);
                }
                let Some(l) = blocking else {
                    return Err(SolverError::Infeasible);
                };
                for (ui, ri) in self.u.iter_mut().zip(r.iter()) {
                    *ui -= t1 * ri;
                }
                u_plus += t1;
                self.drop_constraint(l);
                continue;
            };

            let t2 = -slack / (d2_norm * d2_norm);
            let t2 = if equality { t2 } else { t2.max(0.0) };
            let full_step = equality || t2 <= t1;
            let t = if full_step { t2 } else { t1 };

            self.x.axpy(t, &z, 1.0);
            for (ui, ri) in self.u.iter_mut().zip(r.iter()) {
                *ui -= t * ri;
            }
            u_plus += t;

            if full_step {
                self.add_constraint(p, d);
                self.u.push(u_plus);
                return Ok(());
            }
            self.drop_constraint(blocking.expect("finite t1 has a blocking constraint"));
        }
    }

    /// Solve `R[..q, ..q] r = d[..q]`.
    fn back_substitute(&self, d: &DVector<f64>) -> DVector<f64> {
        let q = self.q();
        let mut r = DVector::zeros(q);
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }

    fn rotate_columns(&mut self, a: usize, b: usize, c: f64, s: f64) {
        for k in 0..self.n {
            let ja = self.j[(k, a)];
            let jb = self.j[(k, b)];
            self.j[(k, a)] = c * ja + s * jb;
            self.j[(k, b)] = -s * ja + c * jb;
        }
    }

    fn add_constraint(&mut self, p: Con, mut d: DVector<f64>) {
        let q = self.q();
        for col in (q + 1..self.n).rev() {
            if d[col] == 0.0 {
                continue;
            }
            let h = d[col - 1].hypot(d[col]);
            let (c, s) = (d[col - 1] / h, d[col] / h);
            d[col - 1] = h;
            d[col] = 0.0;
            self.rotate_columns(col - 1, col, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.active.push(p);
        self.set_active_flag(p, true);
    }

    fn drop_constraint(&mut self, l: usize) {
        let q = self.q();
        let removed = self.active.remove(l);
        self.u.remove(l);
        self.set_active_flag(removed, false);
        for col in l..q - 1 {
            for row in 0..=col + 1 {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        // restore triangular form
        for k in l..q - 1 {
            let a = self.r[(k, k)];
            let b = self.r[(k + 1, k)];
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for col in k..q - 1 {
                let ra = self.r[(k, col)];
                let rb = self.r[(k + 1, col)];
                self.r[(k, col)] = c * ra + s * rb;
                self.r[(k + 1, col)] = -s * ra + c * rb;
            }
            self.rotate_columns(k, k + 1, c, s);
        }
    }

    /// Re-solve the equality-constrained problem on the final active set
    /// to clean up accumulated rounding, then assemble the solution.
    fn finish(mut self) -> QpSolution {
        let q = self.q();
        let n = self.n;
        let jg = self.j.tr_mul(&self.qp.gradient);
        let b: DVector<f64> =
            DVector::from_iterator(q, self.active.iter().map(|c| self.rhs(*c)));
        // y1 = R^{-T} b
        let mut y1 = DVector::zeros(q);
        for i in 0..q {
            let mut acc = b[i];
            for k in 0..i {
                acc -= self.r[(k, i)] * y1[k];
            }
            y1[i] = acc / self.r[(i, i)];
        }
        let mut y = DVector::zeros(n);
        y.rows_mut(0, q).copy_from(&y1);
        y.rows_mut(q, n - q).copy_from(&(-jg.rows(q, n - q)));
        let x_refined = &self.j * &y;
        let rhs = &y1 + jg.rows(0, q);
        let u_refined = self.back_substitute(&rhs);

        let refined_ok = u_refined
            .iter()
            .zip(&self.active)
            .all(|(u, c)| matches!(c, Con::Eq(..)) || *u >= -1e-12)
            && x_refined.iter().all(|v| v.is_finite())
            && self.qp.max_violation(&x_refined) <= self.qp.max_violation(&self.x).max(1e-12);
        if refined_ok {
            self.x = x_refined;
            self.u = u_refined.iter().copied().collect();
        }

        let m_eq = self.qp.eq_rhs.len();
        let m_in = self.qp.ineq_lower.len();
        let mut mult = Multipliers {
            eq: DVector::zeros(m_eq),
            ineq: DVector::zeros(m_in),
            lower: DVector::zeros(n),
            upper: DVector::zeros(n),
        };
        for (c, u) in self.active.iter().zip(&self.u) {
            match *c {
                Con::Eq(k, up) => mult.eq[k] = if up { *u } else { -*u },
                Con::Ineq(k) => mult.ineq[k] = u.max(0.0),
                Con::Lower(i) => mult.lower[i] = u.max(0.0),
                Con::Upper(i) => mult.upper[i] = u.max(0.0),
            }
        }
        let residual = kkt_residual(self.qp, &self.x, &mult);
        let stats = SolveStats {
            objective: self.qp.objective(&self.x),
            iterations: self.iterations,
            converged: true,
            active_constraints: self.active.len(),
            wall_time: 0.0,
            kkt_residual: residual,
        };
        QpSolution {
            x: self.x,
            multipliers: mult,
            stats,
        }
    }
}

/// Max of stationarity, primal infeasibility, dual infeasibility and
/// complementarity violation.
pub fn kkt_residual(qp: &QpProblem, x: &DVector<f64>, m: &Multipliers) -> f64 {
    let grad = &qp.hessian * x + &qp.gradient;
    let stationarity = grad
        - qp.eq_matrix.tr_mul(&m.eq)
        - qp.ineq_matrix.tr_mul(&m.ineq)
        - &m.lower
        + &m.upper;
    let slack_in = &qp.ineq_matrix * x - &qp.ineq_lower;
    let mut comp: f64 = 0.0;
    for k in 0..slack_in.len() {
        comp = comp.max((m.ineq[k] * slack_in[k]).abs());
    }
    for i in 0..x.len() {
        if qp.lower[i].is_finite() {
            comp = comp.max((m.lower[i] * (x[i] - qp.lower[i])).abs());
        }
        if qp.upper[i].is_finite() {
            comp = comp.max((m.upper[i] * (qp.upper[i] - x[i])).abs());
        }
    }
    let dual = m
        .ineq
        .iter()
        .chain(m.lower.iter())
        .chain(m.upper.iter())
        .fold(0.0f64, |acc, v| acc.max(-v));
    stationarity
        .amax()
        .max(qp.max_violation(x))
        .max(comp)
        .max(dual)
}
