use nalgebra::{DMatrix, DVector, SVector};
use num_dual::{hessian, Dual2SVec64, DualNum};

use super::{ControlBounds, Dynamics, DynamicsEval, ParamVec, DEFAULT_DT};

const N: usize = 4;
const VARS: usize = 9; // 4 states, 1 control, 4 parameters

/// Cart-pole with a force on the cart, explicit Euler.
///
/// State `(x, ẋ, φ, φ̇)` with `φ = 0` upright, control is the horizontal force,
/// parameters `θ = (m_c, m_p, g, l)` where `l` is the pole half-length.
///
/// First and second derivatives are exact: the continuous dynamics are written
/// once over a generic dual-number scalar and evaluated with second-order
/// forward-mode duals.
#[derive(Debug, Clone)]
pub struct Cartpole {
    pub dt: f64,
    pub force_limit: f64,
}

impl Default for Cartpole {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            force_limit: 10.0,
        }
    }
}

fn euler_step<D: DualNum<Primitive = f64> + Copy>(v: &[D], dt: f64) -> [D; N] {
    let (pos, vel, phi, omega, force) = (v[0], v[1], v[2], v[3], v[4]);
    let (m_cart, m_pole, g, l) = (v[5], v[6], v[7], v[8]);
    let total = m_cart + m_pole;
    let (s, c) = (phi.sin(), phi.cos());
    let temp = (force + m_pole * l * omega * omega * s) / total;
    let phi_acc = (g * s - c * temp) / (l * (D::from(4.0 / 3.0) - m_pole * c * c / total));
    let x_acc = temp - m_pole * l * phi_acc * c / total;
    [
        pos + vel * dt,
        vel + x_acc * dt,
        phi + omega * dt,
        omega + phi_acc * dt,
    ]
}

fn stack(x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> SVector<f64, VARS> {
    SVector::<f64, VARS>::from_iterator(x.iter().chain(u.iter()).chain(theta.iter()).copied())
}

impl Dynamics for Cartpole {
    fn id(&self) -> &str {
        "cartpole"
    }

    fn state_dim(&self) -> usize {
        N
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        4
    }

    fn default_params(&self) -> ParamVec {
        ParamVec::from_slice(&[1.0, 0.1, 9.81, 0.5]).expect("finite defaults")
    }

    fn default_bounds(&self) -> ControlBounds {
        ControlBounds::symmetric(1, self.force_limit)
    }

    fn initial_state_box(&self) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_vec(vec![-1.0, -0.5, -0.3, -0.5]),
            DVector::from_vec(vec![1.0, 0.5, 0.3, 0.5]),
        )
    }

    fn eval_step(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let v = stack(x, u, theta);
        DVector::from_row_slice(&euler_step(v.as_slice(), self.dt))
    }

    fn eval_linearization(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> DynamicsEval {
        let dt = self.dt;
        let v = stack(x, u, theta);
        let rows = hessian(
            |w: SVector<Dual2SVec64<VARS>, VARS>| euler_step(w.as_slice(), dt),
            &v,
        );

        let tau = N + 1;
        let mut next_state = DVector::zeros(N);
        let mut a = DMatrix::zeros(N, N);
        let mut b = DMatrix::zeros(N, 1);
        let mut df_dtheta = DMatrix::zeros(N, 4);
        let mut djac_dx = vec![DMatrix::zeros(N, tau); N];
        let mut djac_du = vec![DMatrix::zeros(N, tau); 1];
        let mut djac_dtheta = vec![DMatrix::zeros(N, tau); 4];

        for (i, (value, grad, hess)) in rows.iter().enumerate() {
            next_state[i] = *value;
            for k in 0..N {
                a[(i, k)] = grad[k];
            }
            b[(i, 0)] = grad[N];
            for k in 0..4 {
                df_dtheta[(i, k)] = grad[tau + k];
            }
            for k in 0..tau {
                for (j, blk) in djac_dx.iter_mut().enumerate() {
                    blk[(i, k)] = hess[(k, j)];
                }
                djac_du[0][(i, k)] = hess[(k, N)];
                for (j, blk) in djac_dtheta.iter_mut().enumerate() {
                    blk[(i, k)] = hess[(k, tau + j)];
                }
            }
        }

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
