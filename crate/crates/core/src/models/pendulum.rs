use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::{ControlBounds, Dynamics, DynamicsEval, ParamVec, DEFAULT_DT};

/// Torque-driven single-link pendulum, explicit Euler.
///
/// State `(φ, ω)`, control `u` (torque), parameters `θ = (m, l, g)`.
/// Continuous dynamics `ω̇ = (g/l)·sin φ + u/(m·l²)`, so `φ = 0` is the
/// upright equilibrium and `φ = ±π` hangs down. Angles are never wrapped.
#[derive(Debug, Clone)]
pub struct Pendulum {
    pub dt: f64,
    pub torque_limit: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            torque_limit: 2.0,
        }
    }
}

impl Dynamics for Pendulum {
    fn id(&self) -> &str {
        "pendulum"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        3
    }

    fn default_params(&self) -> ParamVec {
        ParamVec::from_slice(&[1.0, 1.0, 9.81]).expect("finite defaults")
    }

    fn default_bounds(&self) -> ControlBounds {
        ControlBounds::symmetric(1, self.torque_limit)
    }

    fn initial_state_box(&self) -> (DVector<f64>, DVector<f64>) {
        (DVector::from_vec(vec![-PI, -1.0]), DVector::from_vec(vec![PI, 1.0]))
    }

    fn eval_step(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let (phi, omega, u) = (x[0], x[1], u[0]);
        let (m, l, g) = (theta[0], theta[1], theta[2]);
        let accel = g / l * phi.sin() + u / (m * l * l);
        DVector::from_vec(vec![phi + self.dt * omega, omega + self.dt * accel])
    }

    fn eval_linearization(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> DynamicsEval {
        let dt = self.dt;
        let (phi, u0) = (x[0], u[0]);
        let (m, l, g) = (theta[0], theta[1], theta[2]);
        let (s, c) = phi.sin_cos();
        let ml2 = m * l * l;

        let next_state = self.eval_step(x, u, theta);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, dt * g / l * c, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, dt / ml2]);

        // ∂ω'/∂(m, l, g)
        let df_dtheta = DMatrix::from_row_slice(
            2,
            3,
            &[
                0.0,
                0.0,
                0.0,
                -dt * u0 / (m * ml2),
                dt * (-g / (l * l) * s - 2.0 * u0 / (m * l * l * l)),
                dt * s / l,
            ],
        );

        // Only entries (1,0) of A and (1,0) of B carry second-order information.
        let block = |a10: f64, b10: f64| {
            let mut d = DMatrix::zeros(2, 3);
            d[(1, 0)] = a10;
            d[(1, 2)] = b10;
            d
        };
        let djac_dx = vec![block(-dt * g / l * s, 0.0), block(0.0, 0.0)];
        let djac_du = vec![block(0.0, 0.0)];
        let djac_dtheta = vec![
            block(0.0, -dt / (m * ml2)),
            block(-dt * g / (l * l) * c, -2.0 * dt / (m * l * l * l)),
            block(dt * c / l, 0.0),
        ];

        DynamicsEval {
            next_state,
            a,
            b,
            df_dtheta,
            djac_dx,
            djac_du,
            djac_dtheta,
        }
    }
}
