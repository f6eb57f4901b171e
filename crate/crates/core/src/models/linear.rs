use nalgebra::{DMatrix, DVector};

use super::{ControlBounds, Dynamics, DynamicsEval, ParamVec, DEFAULT_DT};
use crate::error::{Error, Result};

/// Linear dynamics `x' = A(θ)·x + B(θ)·u` with `A`, `B` affine in θ:
/// `A(θ) = A0 + Σ θ_k A_k`, `B(θ) = B0 + Σ θ_k B_k`.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    id: String,
    a0: DMatrix<f64>,
    b0: DMatrix<f64>,
    a_theta: Vec<DMatrix<f64>>,
    b_theta: Vec<DMatrix<f64>>,
    params: ParamVec,
    bounds: ControlBounds,
}

impl LinearDynamics {
    pub fn new(
        id: impl Into<String>,
        a0: DMatrix<f64>,
        b0: DMatrix<f64>,
        a_theta: Vec<DMatrix<f64>>,
        b_theta: Vec<DMatrix<f64>>,
        params: ParamVec,
        bounds: ControlBounds,
    ) -> Result<Self> {
        let (n, m) = (a0.nrows(), b0.ncols());
        if a0.ncols() != n || b0.nrows() != n {
            return Err(Error::Config("A0 must be n×n and B0 n×m".into()));
        }
        if a_theta.len() != params.len() || b_theta.len() != params.len() {
            return Err(Error::Dimension {
                what: "parameter matrices",
                expected: params.len(),
                got: a_theta.len().min(b_theta.len()),
            });
        }
        if a_theta.iter().any(|a| a.shape() != (n, n)) || b_theta.iter().any(|b| b.shape() != (n, m))
        {
            return Err(Error::Config("parameter matrices must match A0/B0 shapes".into()));
        }
        if bounds.lower.len() != m {
            return Err(Error::Dimension {
                what: "control bounds",
                expected: m,
                got: bounds.lower.len(),
            });
        }
        Ok(Self {
            id: id.into(),
            a0,
            b0,
            a_theta,
            b_theta,
            params,
            bounds,
        })
    }

    /// Parameter-free linear model.
    pub fn fixed(a: DMatrix<f64>, b: DMatrix<f64>, bounds: ControlBounds) -> Result<Self> {
        Self::new(
            "linear-fixed",
            a,
            b,
            Vec::new(),
            Vec::new(),
            ParamVec::new(DVector::zeros(0))?,
            bounds,
        )
    }

    /// Damped double integrator: `θ = (damping, input gain)`.
    ///
    /// `A = [[1, dt], [0, 1 - θ0·dt]]`, `B = [0, θ1·dt]ᵀ`.
    pub fn test_model() -> Self {
        let dt = DEFAULT_DT;
        let a0 = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
        let b0 = DMatrix::zeros(2, 1);
        let a_damp = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -dt]);
        let b_gain = DMatrix::from_row_slice(2, 1, &[0.0, dt]);
        Self::new(
            "linear-test",
            a0,
            b0,
            vec![a_damp, DMatrix::zeros(2, 2)],
            vec![DMatrix::zeros(2, 1), b_gain],
            ParamVec::from_slice(&[0.5, 1.0]).expect("finite"),
            ControlBounds::symmetric(1, 5.0),
        )
        .expect("consistent test model")
    }

    fn matrices(&self, theta: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut a = self.a0.clone();
        let mut b = self.b0.clone();
        for (k, th) in theta.iter().enumerate() {
            a += &self.a_theta[k] * *th;
            b += &self.b_theta[k] * *th;
        }
        (a, b)
    }
}

impl Dynamics for LinearDynamics {
    fn id(&self) -> &str {
        &self.id
    }

    fn state_dim(&self) -> usize {
        self.a0.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b0.ncols()
    }

    fn param_dim(&self) -> usize {
        self.params.len()
    }

    fn default_params(&self) -> ParamVec {
        self.params.clone()
    }

    fn default_bounds(&self) -> ControlBounds {
        self.bounds.clone()
    }

    fn initial_state_box(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.state_dim();
        (DVector::from_element(n, -1.0), DVector::from_element(n, 1.0))
    }

    fn eval_step(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let (a, b) = self.matrices(theta);
        a * x + b * u
    }

    fn eval_linearization(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> DynamicsEval {
        let (n, m, p) = (self.state_dim(), self.control_dim(), self.param_dim());
        let (a, b) = self.matrices(theta);
        let next_state = &a * x + &b * u;
        let mut df_dtheta = DMatrix::zeros(n, p);
        let mut djac_dtheta = Vec::with_capacity(p);
        for k in 0..p {
            let col = &self.a_theta[k] * x + &self.b_theta[k] * u;
            df_dtheta.set_column(k, &col);
            let mut blk = DMatrix::zeros(n, n + m);
            blk.columns_mut(0, n).copy_from(&self.a_theta[k]);
            blk.columns_mut(n, m).copy_from(&self.b_theta[k]);
            djac_dtheta.push(blk);
        }
        DynamicsEval {
            next_state,
            a,
            b,
            df_dtheta,
            djac_dx: vec![DMatrix::zeros(n, n + m); n],
            djac_du: vec![DMatrix::zeros(n, n + m); m],
            djac_dtheta,
        }
    }
}
