//! Parametric dynamics and cost models.
//!
//! Every model exposes its one-step map together with first derivatives in
//! state, control and parameters, and the derivatives of the linearization
//! `[A B]` itself. The latter are what the implicit differentiation stage
//! chains through.

mod cartpole;
mod cost;
mod finite_diff;
mod linear;
mod pendulum;
mod problem;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

pub use cartpole::Cartpole;
pub use cost::{CostEval, CostModel, GoalCost};
pub use finite_diff::{FiniteDiffDynamics, StepFn};
pub use linear::LinearDynamics;
pub use pendulum::Pendulum;
pub use problem::{ParamTarget, Problem, StepEval};

/// Integration step shared by the bundled models.
pub const DEFAULT_DT: f64 = 0.05;

/// A parameter vector. Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec(DVector<f64>);

impl ParamVec {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("parameter vector has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

/// Elementwise box on the controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ControlBounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                what: "control bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u || l.is_nan() || u.is_nan()) {
            return Err(Error::Config("control lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(m: usize, limit: f64) -> Self {
        Self {
            lower: DVector::from_element(m, -limit),
            upper: DVector::from_element(m, limit),
        }
    }

    pub fn unbounded(m: usize) -> Self {
        Self::symmetric(m, f64::INFINITY)
    }

    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            u.len(),
            u.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(v, (l, h))| v.clamp(*l, *h)),
        )
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        u.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}

/// One-step dynamics together with the derivative information used by the
/// linearization and by the differentiation stage.
#[derive(Debug, Clone)]
pub struct DynamicsEval {
    pub next_state: DVector<f64>,
    /// `A = ∂f/∂x`, n×n.
    pub a: DMatrix<f64>,
    /// `B = ∂f/∂u`, n×m.
    pub b: DMatrix<f64>,
    /// n×p.
    pub df_dtheta: DMatrix<f64>,
    /// `∂[A B]/∂x_j` for each state component j; each block is n×(n+m).
    pub djac_dx: Vec<DMatrix<f64>>,
    /// `∂[A B]/∂u_j` for each control component j.
    pub djac_du: Vec<DMatrix<f64>>,
    /// `∂[A B]/∂θ_j` for each parameter j.
    pub djac_dtheta: Vec<DMatrix<f64>>,
}

impl DynamicsEval {
    /// The stacked linearization `D = [A B]`.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let mut d = DMatrix::zeros(n, n + m);
        d.columns_mut(0, n).copy_from(&self.a);
        d.columns_mut(n, m).copy_from(&self.b);
        d
    }

    /// `∂[A B]/∂τ_j` where τ = (x, u).
    pub fn djac_dtau(&self, j: usize) -> &DMatrix<f64> {
        let n = self.djac_dx.len();
        if j < n {
            &self.djac_dx[j]
        } else {
            &self.djac_du[j - n]
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// A discrete-time parametric dynamics model `x' = f(x, u, θ)`.
///
/// Implementations only need to provide the unchecked evaluation routines;
/// the provided `step`/`linearize` validate dimensions first.
pub trait Dynamics: Send + Sync + std::fmt::Debug {
    fn id(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn default_params(&self) -> ParamVec;
    fn default_bounds(&self) -> ControlBounds;
    /// Per-component sampling box for expert initial states.
    fn initial_state_box(&self) -> (DVector<f64>, DVector<f64>);

    fn eval_step(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;
    fn eval_linearization(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> DynamicsEval;

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dims(self, x, u, theta)?;
        Ok(self.eval_step(x, u, theta))
    }

    fn linearize(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> Result<DynamicsEval> {
        check_dims(self, x, u, theta)?;
        Ok(self.eval_linearization(x, u, theta))
    }

    fn sample_initial_state(&self, rng: &mut dyn rand::RngCore) -> DVector<f64> {
        let (lo, hi) = self.initial_state_box();
        DVector::from_iterator(
            lo.len(),
            lo.iter().zip(hi.iter()).map(|(l, h)| {
                if l < h {
                    rng.gen_range(*l..*h)
                } else {
                    *l
                }
            }),
        )
    }
}

fn check_dims<M: Dynamics + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    theta: &DVector<f64>,
) -> Result<()> {
    let checks = [
        ("state", model.state_dim(), x.len()),
        ("control", model.control_dim(), u.len()),
        ("parameters", model.param_dim(), theta.len()),
    ];
    for (what, expected, got) in checks {
        if expected != got {
            return Err(Error::Dimension { what, expected, got });
        }
    }
    Ok(())
}

/// Looks up a bundled dynamics model by its identifier.
pub fn dynamics_by_id(id: &str) -> Result<Arc<dyn Dynamics>> {
    match id {
        "pendulum" => Ok(Arc::new(Pendulum::default())),
        "cartpole" => Ok(Arc::new(Cartpole::default())),
        "linear-test" => Ok(Arc::new(LinearDynamics::test_model())),
        other => Err(Error::Config(format!(
            "unknown model id {other:?} (expected pendulum, cartpole or linear-test)"
        ))),
    }
}

/// Goal-weighted cost used by default with each bundled model: upright at rest
/// with zero control.
pub fn default_goal_cost(model: &dyn Dynamics) -> (GoalCost, ParamVec) {
    let n = model.state_dim();
    let m = model.control_dim();
    let weights: Vec<f64> = match model.id() {
        "pendulum" => vec![1.0, 0.3, 0.3],
        "cartpole" => vec![0.5, 0.3, 1.0, 0.3, 0.1],
        _ => {
            let mut w = vec![1.0; n];
            w.extend(std::iter::repeat_n(0.3, m));
            w
        }
    };
    let goal = vec![0.0; n + m];
    let cost = GoalCost::new(n, m);
    let params = cost.pack(&weights, &goal);
    (cost, params)
}

/// Convenience: a [`Problem`] for a bundled model with its default cost,
/// parameters and bounds.
pub fn default_problem(id: &str, horizon: usize, target: ParamTarget) -> Result<Problem> {
    let dynamics = dynamics_by_id(id)?;
    let (cost, cost_params) = default_goal_cost(dynamics.as_ref());
    let dyn_params = dynamics.default_params();
    let bounds = dynamics.default_bounds();
    Problem::new(dynamics, Arc::new(cost), dyn_params, cost_params, bounds, horizon, target)
}

#[cfg(test)]
pub(crate) mod fd {
    //! Central differences shared by the model unit tests.
    use nalgebra::{DMatrix, DVector};

    pub fn step_size(v: f64) -> f64 {
        1e-6 * (1.0 + v.abs())
    }

    /// Jacobian of `f` at `v` by central differences.
    pub fn jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let f0 = f(v);
        let mut jac = DMatrix::zeros(f0.len(), v.len());
        for j in 0..v.len() {
            let h = step_size(v[j]);
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[j] += h;
            vm[j] -= h;
            let col = (f(&vp) - f(&vm)) / (2.0 * h);
            jac.set_column(j, &col);
        }
        jac
    }

    pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let scale = b.amax().max(1.0);
        (a - b).amax() / scale
    }
}
