use nalgebra::{DMatrix, DVector, Matrix4, Vector4};

use super::qp::HessianFactor;
use super::SolverError;
use crate::model::{AgentState, Bounds, ControlInput, DynamicsModel, Trajectory};

/// Diagonal weights of the tracking cost
///
/// ```text
/// J = sum_{l<N} (x_l - r_l)' Q (x_l - r_l) + u_l' R u_l  +  (x_N - r_N)' P (x_N - r_N)
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub state: Vector4<f64>,
    pub input: f64,
    pub terminal: Vector4<f64>,
}

impl CostWeights {
    pub fn uniform(q: f64, r: f64, p: f64) -> Self {
        Self {
            state: Vector4::repeat(q),
            input: r,
            terminal: Vector4::repeat(p),
        }
    }

    fn is_valid(&self) -> bool {
        self.state.iter().chain(self.terminal.iter()).all(|w| *w >= 0.0 && w.is_finite())
            && self.input >= 0.0
            && self.input.is_finite()
    }
}

/// Box limits on position (map bounds), per-axis speed and per-axis
/// acceleration. Infinite caps disable the corresponding rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateInputBounds {
    pub position: Option<Bounds>,
    pub speed_cap: f64,
    pub accel_cap: f64,
}

impl StateInputBounds {
    pub fn unbounded() -> Self {
        Self {
            position: None,
            speed_cap: f64::INFINITY,
            accel_cap: f64::INFINITY,
        }
    }
}

/// Dynamics eliminated over the horizon: `x_l = A^l x_0 + Gamma_l u`.
#[derive(Debug, Clone)]
pub struct Prediction {
    horizon: usize,
    powers: Vec<Matrix4<f64>>,
    /// Stacked `Gamma_l`, rows `4l..4l+4`.
    gamma: DMatrix<f64>,
}

impl Prediction {
    pub fn new(model: &DynamicsModel, horizon: usize) -> Self {
        let nu = 2 * horizon;
        let mut gamma = DMatrix::zeros(4 * (horizon + 1), nu);
        let mut powers = Vec::with_capacity(horizon + 1);
        powers.push(Matrix4::identity());
        for l in 0..horizon {
            powers.push(model.a() * powers[l]);
            let next = model.a() * gamma.rows(4 * l, 4);
            gamma.rows_mut(4 * (l + 1), 4).copy_from(&next);
            let mut block = gamma.view_mut((4 * (l + 1), 2 * l), (4, 2));
            block += model.b();
        }
        Self {
            horizon,
            powers,
            gamma,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn free_response(&self, x0: &AgentState) -> Vec<Vector4<f64>> {
        let x = x0.to_vector();
        self.powers.iter().map(|p| p * x).collect()
    }

    /// Sensitivity of state `l` to the stacked inputs (4 x 2N).
    pub fn gamma(&self, l: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.gamma.rows(4 * l, 4)
    }

    pub fn state(&self, free: &[Vector4<f64>], u: &[f64], l: usize) -> Vector4<f64> {
        let mut x = free[l];
        let g = self.gamma(l);
        // Gamma_l only touches inputs 0..l
        for k in 0..2 * l {
            let uk = u[k];
            if uk != 0.0 {
                for c in 0..4 {
                    x[c] += g[(c, k)] * uk;
                }
            }
        }
        x
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundRow {
    step: usize,
    component: usize,
    upper: bool,
    limit: f64,
}

/// Everything about a single-agent horizon problem that does not depend on
/// the initial state or reference: condensed Hessian and its factor, and
/// the state-bound rows. Build once per parameter set and reuse.
#[derive(Debug, Clone)]
pub struct TrajectoryProblem {
    model: DynamicsModel,
    weights: CostWeights,
    bounds: StateInputBounds,
    prediction: Prediction,
    hessian: DMatrix<f64>,
    factor: HessianFactor,
    bound_matrix: DMatrix<f64>,
    bound_rows: Vec<BoundRow>,
}

impl TrajectoryProblem {
    pub fn new(
        model: DynamicsModel,
        horizon: usize,
        weights: CostWeights,
        bounds: StateInputBounds,
    ) -> Result<Self, SolverError> {
        if horizon == 0 {
            return Err(SolverError::InvalidProblem("horizon must be at least 1".into()));
        }
        if !weights.is_valid() {
            return Err(SolverError::InvalidProblem("cost weights must be non-negative".into()));
        }
        if !(bounds.speed_cap > 0.0 && bounds.accel_cap > 0.0)
            || bounds.position.is_some_and(|b| b.is_empty())
        {
            return Err(SolverError::InvalidProblem("bounds must be non-empty".into()));
        }
        let prediction = Prediction::new(&model, horizon);
        let nu = 2 * horizon;
        let mut hessian = DMatrix::identity(nu, nu) * (2.0 * weights.input);
        for l in 1..=horizon {
            let w = if l == horizon {
                weights.terminal
            } else {
                weights.state
            };
            let g = prediction.gamma(l);
            let wg = DMatrix::from_diagonal(&DVector::from_column_slice(w.as_slice())) * g;
            hessian += 2.0 * g.transpose() * wg;
        }
        // exact symmetry for the factorisation
        let hessian = 0.5 * (&hessian + hessian.transpose());
        let factor = HessianFactor::new(&hessian)?;

        let mut rows = Vec::new();
        for l in 1..=horizon {
            if let Some(b) = bounds.position {
                for c in 0..2 {
                    rows.push(BoundRow { step: l, component: c, upper: false, limit: b.min[c] });
                    rows.push(BoundRow { step: l, component: c, upper: true, limit: b.max[c] });
                }
            }
            if bounds.speed_cap.is_finite() {
                for c in 2..4 {
                    rows.push(BoundRow { step: l, component: c, upper: false, limit: -bounds.speed_cap });
                    rows.push(BoundRow { step: l, component: c, upper: true, limit: bounds.speed_cap });
                }
            }
        }
        let mut bound_matrix = DMatrix::zeros(rows.len(), nu);
        for (k, row) in rows.iter().enumerate() {
            let g = prediction.gamma(row.step);
            let sign = if row.upper { -1.0 } else { 1.0 };
            for j in 0..nu {
                bound_matrix[(k, j)] = sign * g[(row.component, j)];
            }
        }

        Ok(Self {
            model,
            weights,
            bounds,
            prediction,
            hessian,
            factor,
            bound_matrix,
            bound_rows: rows,
        })
    }

    pub fn horizon(&self) -> usize {
        self.prediction.horizon
    }

    pub fn num_inputs(&self) -> usize {
        2 * self.horizon()
    }

    pub fn model(&self) -> &DynamicsModel {
        &self.model
    }

    pub fn weights(&self) -> &CostWeights {
        &self.weights
    }

    pub fn bounds(&self) -> &StateInputBounds {
        &self.bounds
    }

    pub fn prediction(&self) -> &Prediction {
        &self.prediction
    }

    /// Hessian of `J` in the stacked inputs, `J = 1/2 u'Hu + g'u + c`.
    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn factor(&self) -> &HessianFactor {
        &self.factor
    }

    /// Linear term and constant of the condensed objective.
    pub fn linear_term(&self, x0: &AgentState, reference: &[AgentState]) -> (DVector<f64>, f64) {
        let n = self.horizon();
        assert_eq!(reference.len(), n + 1, "reference length must be horizon + 1");
        let free = self.prediction.free_response(x0);
        let mut g = DVector::zeros(2 * n);
        let e0 = free[0] - reference[0].to_vector();
        let mut constant = e0.dot(&self.weights.state.component_mul(&e0));
        for l in 1..=n {
            let w = if l == n {
                self.weights.terminal
            } else {
                self.weights.state
            };
            let e = free[l] - reference[l].to_vector();
            let we = w.component_mul(&e);
            constant += e.dot(&we);
            g += 2.0 * self.prediction.gamma(l).tr_mul(&we);
        }
        (g, constant)
    }

    /// State-bound rows `M u >= b` for an initial state.
    pub fn bound_matrix(&self) -> &DMatrix<f64> {
        &self.bound_matrix
    }

    pub fn bound_rhs(&self, x0: &AgentState) -> DVector<f64> {
        let free = self.prediction.free_response(x0);
        DVector::from_iterator(
            self.bound_rows.len(),
            self.bound_rows.iter().map(|r| {
                let f = free[r.step][r.component];
                if r.upper {
                    f - r.limit
                } else {
                    r.limit - f
                }
            }),
        )
    }

    pub fn input_bounds(&self) -> (f64, f64) {
        (-self.bounds.accel_cap, self.bounds.accel_cap)
    }

    /// Tracking objective recomputed from an explicit trajectory.
    pub fn objective(&self, reference: &[AgentState], traj: &Trajectory) -> f64 {
        let n = self.horizon();
        let mut j = 0.0;
        for ((s, r), u) in traj.states.iter().zip(reference).zip(&traj.inputs).take(n) {
            let e = s.to_vector() - r.to_vector();
            j += e.dot(&self.weights.state.component_mul(&e));
            j += self.weights.input * u.acceleration.norm_squared();
        }
        let e = traj.states[n].to_vector() - reference[n].to_vector();
        j + e.dot(&self.weights.terminal.component_mul(&e))
    }

    pub fn rollout(&self, x0: &AgentState, u: &[f64]) -> Trajectory {
        let inputs = u
            .chunks_exact(2)
            .map(|c| ControlInput::new(c[0], c[1]))
            .collect();
        Trajectory::rollout(&self.model, *x0, inputs)
    }

    pub fn stack_inputs(traj: &Trajectory) -> Vec<f64> {
        traj.inputs
            .iter()
            .flat_map(|u| [u.acceleration.x, u.acceleration.y])
            .collect()
    }
}
