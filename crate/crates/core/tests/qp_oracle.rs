//! Dual active-set QP solver against exhaustive active-set enumeration.

mod oracles;

use cbmpc::nlp::{solve_qp, QpProblem, SolverError};
use nalgebra::{DMatrix, DVector};

#[test]
fn hundred_random_qps_match_enumeration() {
    let report = oracles::qp::check(100, 2024, 1e-6);
    println!("worst deviation from enumeration oracle: {:e}", report.worst);
    assert!(report.passed(), "{:#?}", report.failures);
}

#[test]
fn contradictory_constraints_are_infeasible() {
    let qp = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2))
        .with_inequalities(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]), DVector::from_vec(vec![1.0, 0.0]));
    assert!(matches!(solve_qp(&qp), Err(SolverError::Infeasible)));
    assert!(oracles::qp::enumeration_oracle(&qp).is_none());
}
