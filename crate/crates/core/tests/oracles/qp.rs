//! Dual active-set QP against exhaustive active-set enumeration.

use cbmpc::nlp::{solve_qp, QpProblem};

use super::Report;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every constraint as a row `a' x >= b`, bounds included.
fn rows(qp: &QpProblem) -> Vec<(DVector<f64>, f64)> {
    let n = qp.dim();
    let mut out = Vec::new();
    for i in 0..qp.ineq_matrix.nrows() {
        out.push((qp.ineq_matrix.row(i).transpose(), qp.ineq_lower[i]));
    }
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        if qp.lower[i].is_finite() {
            out.push((e.clone(), qp.lower[i]));
        }
        if qp.upper[i].is_finite() {
            out.push((-e, -qp.upper[i]));
        }
    }
    out
}

/// Minimise over every subset of inequalities held with equality; the best
/// feasible face minimiser is the global optimum of a strictly convex QP.
pub fn enumeration_oracle(qp: &QpProblem) -> Option<DVector<f64>> {
    let n = qp.dim();
    let ineq = rows(qp);
    let me = qp.eq_matrix.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << ineq.len()) {
        let active: Vec<&(DVector<f64>, f64)> =
            (0..ineq.len()).filter(|k| mask & (1 << k) != 0).map(|k| &ineq[k]).collect();
        let m = me + active.len();
        if m > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + m, n + m);
        let mut rhs = DVector::zeros(n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.hessian);
        rhs.rows_mut(0, n).copy_from(&(-&qp.gradient));
        for r in 0..me {
            for c in 0..n {
                kkt[(n + r, c)] = qp.eq_matrix[(r, c)];
                kkt[(c, n + r)] = qp.eq_matrix[(r, c)];
            }
            rhs[n + r] = qp.eq_rhs[r];
        }
        for (k, (a, b)) in active.iter().enumerate() {
            for c in 0..n {
                kkt[(n + me + k, c)] = a[c];
                kkt[(c, n + me + k)] = a[c];
            }
            rhs[n + me + k] = *b;
        }
        if kkt.determinant().abs() < 1e-12 {
            continue;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let feasible = ineq.iter().all(|(a, b)| a.dot(&x) >= b - 1e-9)
            && (0..me).all(|r| (qp.eq_matrix.row(r).transpose().dot(&x) - qp.eq_rhs[r]).abs() < 1e-9);
        if !feasible {
            continue;
        }
        let f = qp.objective(&x);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, x));
        }
    }
    best.map(|(_, x)| x)
}

fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(0..=4);
    let me = if n > 1 && rng.random_bool(0.3) { 1 } else { 0 };
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let hessian = &l * l.transpose() + DMatrix::identity(n, n) * 0.5;
    let gradient = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    // constraints are built around an interior point so every instance is feasible
    let anchor = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let ineq = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let lower = DVector::from_fn(m, |i, _| ineq.row(i).transpose().dot(&anchor) - rng.random_range(0.0..0.5));
    let eq = DMatrix::from_fn(me, n, |_, _| rng.random_range(-1.0..1.0));
    let eq_rhs = &eq * &anchor;
    let lo = DVector::from_fn(n, |i, _| if rng.random_bool(0.5) { anchor[i] - rng.random_range(0.1..1.0) } else { f64::NEG_INFINITY });
    let hi = DVector::from_fn(n, |i, _| if rng.random_bool(0.5) { anchor[i] + rng.random_range(0.1..1.0) } else { f64::INFINITY });
    QpProblem::unconstrained(hessian, gradient)
        .with_inequalities(ineq, lower)
        .with_equalities(eq, eq_rhs)
        .with_bounds(lo, hi)
}

/// Compare `solve_qp` with enumeration on `count` random feasible QPs.
pub fn check(count: usize, seed: u64, tol: f64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();
    for k in 0..count {
        let qp = random_qp(&mut rng);
        let expected = enumeration_oracle(&qp).expect("instances are feasible by construction");
        report.checked += 1;
        match solve_qp(&qp) {
            Ok(got) => {
                let err = (&got.x - &expected).amax();
                report.worst = report.worst.max(err);
                if err > tol {
                    report.failures.push(format!("instance {k}: |x - x*| = {err:e}"));
                }
            }
            Err(e) => report.failures.push(format!("instance {k}: {e}")),
        }
    }
    report
}
