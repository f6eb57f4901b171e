use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{ControlBounds, Dynamics, DynamicsEval, ParamVec};

/// A user-supplied one-step map `(x, u, θ) -> x'`.
pub type StepFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Wraps an arbitrary step function and supplies every derivative by central
/// differences. First derivatives use `h = 1e-6·(1+|v|)`, the derivatives of
/// `[A B]` difference the first-derivative routine with `h = 1e-4·(1+|v|)`.
#[derive(Clone)]
pub struct FiniteDiffDynamics {
    id: String,
    n: usize,
    m: usize,
    step_fn: StepFn,
    params: ParamVec,
    bounds: ControlBounds,
    init_box: (DVector<f64>, DVector<f64>),
}

impl std::fmt::Debug for FiniteDiffDynamics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FiniteDiffDynamics")
            .field("id", &self.id)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("p", &self.params.len())
            .finish()
    }
}

impl FiniteDiffDynamics {
    pub fn new(
        id: impl Into<String>,
        state_dim: usize,
        control_dim: usize,
        step_fn: StepFn,
        params: ParamVec,
        bounds: ControlBounds,
    ) -> Self {
        Self {
            id: id.into(),
            n: state_dim,
            m: control_dim,
            step_fn,
            params,
            bounds,
            init_box: (
                DVector::from_element(state_dim, -1.0),
                DVector::from_element(state_dim, 1.0),
            ),
        }
    }

    pub fn with_initial_state_box(mut self, lo: DVector<f64>, hi: DVector<f64>) -> Self {
        self.init_box = (lo, hi);
        self
    }

    fn first_order(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let f = &self.step_fn;
        let a = central(|v| f(v, u, theta), x, 1e-6);
        let b = central(|v| f(x, v, theta), u, 1e-6);
        let t = central(|v| f(x, u, v), theta, 1e-6);
        (a, b, t)
    }

    fn jac(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let (a, b, _) = self.first_order(x, u, theta);
        let mut d = DMatrix::zeros(self.n, self.n + self.m);
        d.columns_mut(0, self.n).copy_from(&a);
        d.columns_mut(self.n, self.m).copy_from(&b);
        d
    }
}

fn central(f: impl Fn(&DVector<f64>) -> DVector<f64>, v: &DVector<f64>, base: f64) -> DMatrix<f64> {
    let mut cols = Vec::with_capacity(v.len());
    for j in 0..v.len() {
        let h = base * (1.0 + v[j].abs());
        let mut vp = v.clone();
        let mut vm = v.clone();
        vp[j] += h;
        vm[j] -= h;
        cols.push((f(&vp) - f(&vm)) / (2.0 * h));
    }
    if cols.is_empty() {
        let rows = f(v).len();
        return DMatrix::zeros(rows, 0);
    }
    DMatrix::from_columns(&cols)
}

fn central_blocks(
    f: impl Fn(&DVector<f64>) -> DMatrix<f64>,
    v: &DVector<f64>,
    base: f64,
) -> Vec<DMatrix<f64>> {
    (0..v.len())
        .map(|j| {
            let h = base * (1.0 + v[j].abs());
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[j] += h;
            vm[j] -= h;
            (f(&vp) - f(&vm)) / (2.0 * h)
        })
        .collect()
}

impl Dynamics for FiniteDiffDynamics {
    fn id(&self) -> &str {
        &self.id
    }

    fn state_dim(&self) -> usize {
        self.n
    }

    fn control_dim(&self) -> usize {
        self.m
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
        self.init_box.clone()
    }

    fn eval_step(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        (self.step_fn)(x, u, theta)
    }

    fn eval_linearization(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> DynamicsEval {
        let (a, b, df_dtheta) = self.first_order(x, u, theta);
        DynamicsEval {
            next_state: self.eval_step(x, u, theta),
            a,
            b,
            df_dtheta,
            djac_dx: central_blocks(|v| self.jac(v, u, theta), x, 1e-4),
            djac_du: central_blocks(|v| self.jac(x, v, theta), u, 1e-4),
            djac_dtheta: central_blocks(|v| self.jac(x, u, v), theta, 1e-4),
        }
    }
}
