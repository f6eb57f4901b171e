use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ControlBounds, CostEval, CostModel, Dynamics, DynamicsEval, ParamVec};
use crate::error::{Error, Result};

/// Which parameters play the role of θ for differentiation and learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamTarget {
    /// Physical parameters of the dynamics; the cost is fixed.
    Dynamics,
    /// Cost parameters; the dynamics are fixed.
    Cost,
    /// Dynamics parameters followed by cost parameters.
    Both,
}

/// Dynamics and cost derivatives at one time step, with θ-derivatives
/// expressed in the coordinates selected by the problem's [`ParamTarget`].
#[derive(Debug, Clone)]
pub struct StepEval {
    pub dynamics: DynamicsEval,
    pub cost: CostEval,
}

/// A finite-horizon control problem: dynamics, stage cost, their parameters,
/// the control box and the horizon.
#[derive(Debug, Clone)]
pub struct Problem {
    dynamics: Arc<dyn Dynamics>,
    cost: Arc<dyn CostModel>,
    dyn_params: ParamVec,
    cost_params: ParamVec,
    bounds: ControlBounds,
    horizon: usize,
    target: ParamTarget,
}

impl Problem {
    pub fn new(
        dynamics: Arc<dyn Dynamics>,
        cost: Arc<dyn CostModel>,
        dyn_params: ParamVec,
        cost_params: ParamVec,
        bounds: ControlBounds,
        horizon: usize,
        target: ParamTarget,
    ) -> Result<Self> {
        let (n, m) = (dynamics.state_dim(), dynamics.control_dim());
        let checks = [
            ("cost state dimension", n, cost.state_dim()),
            ("cost control dimension", m, cost.control_dim()),
            ("dynamics parameters", dynamics.param_dim(), dyn_params.len()),
            ("cost parameters", cost.param_dim(), cost_params.len()),
            ("control bounds", m, bounds.lower.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::Dimension { what, expected, got });
            }
        }
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        Ok(Self {
            dynamics,
            cost,
            dyn_params,
            cost_params,
            bounds,
            horizon,
            target,
        })
    }

    pub fn dynamics(&self) -> &Arc<dyn Dynamics> {
        &self.dynamics
    }

    pub fn cost(&self) -> &Arc<dyn CostModel> {
        &self.cost
    }

    pub fn dyn_params(&self) -> &ParamVec {
        &self.dyn_params
    }

    pub fn cost_params(&self) -> &ParamVec {
        &self.cost_params
    }

    pub fn bounds(&self) -> &ControlBounds {
        &self.bounds
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn target(&self) -> ParamTarget {
        self.target
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }

    pub fn param_dim(&self) -> usize {
        match self.target {
            ParamTarget::Dynamics => self.dyn_params.len(),
            ParamTarget::Cost => self.cost_params.len(),
            ParamTarget::Both => self.dyn_params.len() + self.cost_params.len(),
        }
    }

    /// The current value of θ.
    pub fn theta(&self) -> DVector<f64> {
        match self.target {
            ParamTarget::Dynamics => self.dyn_params.as_vector().clone(),
            ParamTarget::Cost => self.cost_params.as_vector().clone(),
            ParamTarget::Both => DVector::from_iterator(
                self.param_dim(),
                self.dyn_params
                    .as_vector()
                    .iter()
                    .chain(self.cost_params.as_vector().iter())
                    .copied(),
            ),
        }
    }

    /// A copy of this problem with θ replaced.
    pub fn with_theta(&self, theta: &DVector<f64>) -> Result<Self> {
        if theta.len() != self.param_dim() {
            return Err(Error::Dimension {
                what: "θ",
                expected: self.param_dim(),
                got: theta.len(),
            });
        }
        let mut out = self.clone();
        let pd = self.dyn_params.len();
        match self.target {
            ParamTarget::Dynamics => out.dyn_params = ParamVec::new(theta.clone())?,
            ParamTarget::Cost => out.cost_params = ParamVec::new(theta.clone())?,
            ParamTarget::Both => {
                out.dyn_params = ParamVec::new(theta.rows(0, pd).into_owned())?;
                out.cost_params = ParamVec::new(theta.rows(pd, theta.len() - pd).into_owned())?;
            }
        }
        Ok(out)
    }

    pub fn with_target(&self, target: ParamTarget) -> Self {
        let mut out = self.clone();
        out.target = target;
        out
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let mut out = self.clone();
        out.horizon = horizon;
        Ok(out)
    }

    pub fn with_bounds(&self, bounds: ControlBounds) -> Result<Self> {
        if bounds.lower.len() != self.control_dim() {
            return Err(Error::Dimension {
                what: "control bounds",
                expected: self.control_dim(),
                got: bounds.lower.len(),
            });
        }
        let mut out = self.clone();
        out.bounds = bounds;
        Ok(out)
    }

    /// `f(x, u, θ)`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.dynamics.eval_step(x, u, self.dyn_params.as_vector())
    }

    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> f64 {
        self.cost
            .eval_unchecked(x, u, self.cost_params.as_vector(), t)
            .value
    }

    /// Linearizes the dynamics and quadraticizes the cost at `(x, u)`.
    pub fn eval_step(&self, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> Result<StepEval> {
        let mut dynamics = self
            .dynamics
            .linearize(x, u, self.dyn_params.as_vector())?;
        if dynamics.next_state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "dynamics", t });
        }
        let mut cost = self.cost.eval(x, u, self.cost_params.as_vector(), t)?;

        let (n, m) = (self.state_dim(), self.control_dim());
        let k = n + m;
        match self.target {
            ParamTarget::Dynamics => {
                let p = self.param_dim();
                cost.dgrad_dtheta = DMatrix::zeros(k, p);
                cost.dhess_dtheta = vec![DMatrix::zeros(k, k); p];
            }
            ParamTarget::Cost => {
                let p = self.param_dim();
                dynamics.df_dtheta = DMatrix::zeros(n, p);
                dynamics.djac_dtheta = vec![DMatrix::zeros(n, k); p];
            }
            ParamTarget::Both => {
                let (pd, pc) = (self.dyn_params.len(), self.cost_params.len());
                let mut df = DMatrix::zeros(n, pd + pc);
                df.columns_mut(0, pd).copy_from(&dynamics.df_dtheta);
                dynamics.df_dtheta = df;
                dynamics
                    .djac_dtheta
                    .extend(std::iter::repeat_n(DMatrix::zeros(n, k), pc));
                let mut dg = DMatrix::zeros(k, pd + pc);
                dg.columns_mut(pd, pc).copy_from(&cost.dgrad_dtheta);
                cost.dgrad_dtheta = dg;
                let mut dh = vec![DMatrix::zeros(k, k); pd];
                dh.append(&mut cost.dhess_dtheta);
                cost.dhess_dtheta = dh;
            }
        }
        Ok(StepEval { dynamics, cost })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::default_problem;

    #[test]
    fn theta_round_trips_for_every_target() {
        for target in [ParamTarget::Dynamics, ParamTarget::Cost, ParamTarget::Both] {
            let prob = default_problem("pendulum", 5, target).unwrap();
            let th = prob.theta() * 1.25;
            let moved = prob.with_theta(&th).unwrap();
            assert_eq!(moved.theta(), th);
        }
    }

    #[test]
    fn step_eval_pads_derivatives_for_joint_target() {
        let prob = default_problem("pendulum", 5, ParamTarget::Both).unwrap();
        let e = prob
            .eval_step(&DVector::from_vec(vec![0.3, 0.1]), &DVector::from_vec(vec![0.2]), 1)
            .unwrap();
        assert_eq!(e.dynamics.df_dtheta.ncols(), 9);
        assert_eq!(e.dynamics.djac_dtheta.len(), 9);
        assert_eq!(e.cost.dgrad_dtheta.ncols(), 9);
        assert_eq!(e.cost.dhess_dtheta.len(), 9);
        assert!(e.cost.dgrad_dtheta.columns(0, 3).amax() == 0.0);
        assert!(e.dynamics.df_dtheta.columns(3, 6).amax() == 0.0);
    }

    #[test]
    fn mismatched_theta_is_rejected() {
        let prob = default_problem("cartpole", 5, ParamTarget::Dynamics).unwrap();
        assert!(prob.with_theta(&DVector::zeros(3)).is_err());
    }
}
