use nalgebra::{DMatrix, DVector};

use super::ParamVec;
use crate::error::{Error, Result};

/// Value, gradient `c`, Hessian `C` of a stage cost in `τ = (x, u)`, plus
/// the derivatives of `c` and `C` needed by the differentiation stage.
#[derive(Debug, Clone)]
pub struct CostEval {
    pub value: f64,
    /// `c = ∂g/∂τ`, length n+m.
    pub grad: DVector<f64>,
    /// `C = ∂²g/∂τ²`, (n+m)×(n+m), symmetric.
    pub hess: DMatrix<f64>,
    /// `∂C/∂τ_j` for each component of τ. `∂c/∂τ` is `C` itself.
    pub dhess_dtau: Vec<DMatrix<f64>>,
    /// `∂C/∂θ_j` for each cost parameter.
    pub dhess_dtheta: Vec<DMatrix<f64>>,
    /// `∂c/∂θ`, (n+m)×p.
    pub dgrad_dtheta: DMatrix<f64>,
}

impl CostEval {
    fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad.iter().all(|v| v.is_finite())
            && self.hess.iter().all(|v| v.is_finite())
            && self.dgrad_dtheta.iter().all(|v| v.is_finite())
    }
}

/// A parametric stage cost `g_t(x, u, θ_cost)`.
pub trait CostModel: Send + Sync + std::fmt::Debug {
    fn id(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    fn eval_unchecked(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
        t: usize,
    ) -> CostEval;

    /// Evaluates the stage cost at time index `t`, rejecting non-finite output.
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>, t: usize) -> Result<CostEval> {
        let checks = [
            ("cost state", self.state_dim(), x.len()),
            ("cost control", self.control_dim(), u.len()),
            ("cost parameters", self.param_dim(), theta.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::Dimension { what, expected, got });
            }
        }
        let eval = self.eval_unchecked(x, u, theta, t);
        if !eval.is_finite() {
            return Err(Error::NonFinite { what: "cost", t });
        }
        Ok(eval)
    }
}

/// Weighted squared distance to a goal, `g = ½‖w ∘ (τ − τ_g)‖²`.
///
/// Parameters are packed as `θ_cost = (w, τ_g)`, each of length n+m, so
/// `C = diag(w²)` and `c = w² ∘ (τ − τ_g)`.
#[derive(Debug, Clone)]
pub struct GoalCost {
    n: usize,
    m: usize,
}

impl GoalCost {
    pub fn new(state_dim: usize, control_dim: usize) -> Self {
        Self {
            n: state_dim,
            m: control_dim,
        }
    }

    pub fn pack(&self, weights: &[f64], goal: &[f64]) -> ParamVec {
        assert_eq!(weights.len(), self.n + self.m);
        assert_eq!(goal.len(), self.n + self.m);
        ParamVec::new(DVector::from_iterator(
            2 * (self.n + self.m),
            weights.iter().chain(goal.iter()).copied(),
        ))
        .expect("goal cost parameters must be finite")
    }

    /// Indices of the weight block inside `θ_cost`.
    pub fn weight_indices(&self) -> std::ops::Range<usize> {
        0..self.n + self.m
    }

    /// Indices of the goal block inside `θ_cost`.
    pub fn goal_indices(&self) -> std::ops::Range<usize> {
        self.n + self.m..2 * (self.n + self.m)
    }
}

impl CostModel for GoalCost {
    fn id(&self) -> &str {
        "goal"
    }

    fn state_dim(&self) -> usize {
        self.n
    }

    fn control_dim(&self) -> usize {
        self.m
    }

    fn param_dim(&self) -> usize {
        2 * (self.n + self.m)
    }

    fn eval_unchecked(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
        _t: usize,
    ) -> CostEval {
        let k = self.n + self.m;
        let p = 2 * k;
        let tau = DVector::from_iterator(k, x.iter().chain(u.iter()).copied());
        let w = theta.rows(0, k);
        let goal = theta.rows(k, k);
        let diff = &tau - goal;

        let mut value = 0.0;
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        let mut dgrad_dtheta = DMatrix::zeros(k, p);
        let mut dhess_dtheta = vec![DMatrix::zeros(k, k); p];
        for i in 0..k {
            let w2 = w[i] * w[i];
            value += 0.5 * w2 * diff[i] * diff[i];
            grad[i] = w2 * diff[i];
            hess[(i, i)] = w2;
            dgrad_dtheta[(i, i)] = 2.0 * w[i] * diff[i];
            dgrad_dtheta[(i, k + i)] = -w2;
            dhess_dtheta[i][(i, i)] = 2.0 * w[i];
        }
        CostEval {
            value,
            grad,
            hess,
            dhess_dtau: vec![DMatrix::zeros(k, k); k],
            dhess_dtheta,
            dgrad_dtheta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::fd;

    fn pendulum_cost() -> (GoalCost, DVector<f64>) {
        let cost = GoalCost::new(2, 1);
        let th = cost.pack(&[1.0, 0.5, 0.2], &[0.1, -0.3, 0.05]).into_vector();
        (cost, th)
    }

    #[test]
    fn zero_at_goal() {
        let (cost, th) = pendulum_cost();
        let e = cost
            .eval(&DVector::from_vec(vec![0.1, -0.3]), &DVector::from_vec(vec![0.05]), &th, 1)
            .unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.grad, DVector::zeros(3));
    }

    #[test]
    fn unit_weights_give_identity_hessian() {
        let cost = GoalCost::new(2, 1);
        let th = cost.pack(&[1.0; 3], &[0.0; 3]).into_vector();
        let e = cost
            .eval(&DVector::from_vec(vec![0.4, 2.0]), &DVector::from_vec(vec![-1.0]), &th, 3)
            .unwrap();
        assert_eq!(e.hess, DMatrix::identity(3, 3));
        assert_eq!(e.hess, e.hess.transpose());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let (cost, th) = pendulum_cost();
        let x = DVector::from_vec(vec![0.8, -0.1]);
        let u = DVector::from_vec(vec![1.4]);
        let e = cost.eval(&x, &u, &th, 2).unwrap();
        let tau = DVector::from_vec(vec![0.8, -0.1, 1.4]);
        let split = |v: &DVector<f64>| (v.rows(0, 2).into_owned(), v.rows(2, 1).into_owned());

        let value = |v: &DVector<f64>| {
            let (x, u) = split(v);
            DVector::from_element(1, cost.eval_unchecked(&x, &u, &th, 2).value)
        };
        let grad = |v: &DVector<f64>| {
            let (x, u) = split(v);
            cost.eval_unchecked(&x, &u, &th, 2).grad
        };
        let c_fd = fd::jacobian(value, &tau).transpose();
        let h_fd = fd::jacobian(grad, &tau);
        assert!(fd::rel_err(&DMatrix::from_column_slice(3, 1, e.grad.as_slice()), &c_fd) < 1e-6);
        assert!(fd::rel_err(&e.hess, &h_fd) < 1e-6);

        let grad_th = |v: &DVector<f64>| cost.eval_unchecked(&x, &u, v, 2).grad;
        assert!(fd::rel_err(&e.dgrad_dtheta, &fd::jacobian(grad_th, &th)) < 1e-6);
    }

    #[test]
    fn non_finite_output_reports_time_index() {
        let (cost, mut th) = pendulum_cost();
        th[0] = f64::INFINITY;
        let err = cost
            .eval(&DVector::from_vec(vec![1.0, 0.0]), &DVector::zeros(1), &th, 7)
            .unwrap_err();
        assert_eq!(err, Error::NonFinite { what: "cost", t: 7 });
    }
}
