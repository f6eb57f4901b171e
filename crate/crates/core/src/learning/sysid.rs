use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::dataset::ExpertRecord;
use crate::error::{Error, Result};
use crate::models::{ParamTarget, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SysidOptions {
    pub max_iter: usize,
    /// Stop once the step satisfies `‖δ‖∞ ≤ step_tol·(1 + ‖θ‖∞)`.
    pub step_tol: f64,
    /// Singular values below `rank_tol·σ_max` count as zero.
    pub rank_tol: f64,
}

impl Default for SysidOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            step_tol: 1e-13,
            rank_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SysidResult {
    pub theta: Vec<f64>,
    pub iterations: usize,
    /// Mean squared transition residual at `theta`.
    pub objective: f64,
    pub initial_objective: f64,
    /// Numerical rank of the stacked `∂f/∂θ` at `theta`.
    pub rank: usize,
    /// Fewer independent equations than parameters: only some combinations
    /// of θ are determined by the data.
    pub underdetermined: bool,
    pub converged: bool,
}

struct Transition {
    x: DVector<f64>,
    u: DVector<f64>,
    next: DVector<f64>,
}

fn transitions(learner: &Problem, records: &[ExpertRecord]) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for r in records {
        let states = r
            .states
            .as_ref()
            .ok_or_else(|| Error::Config("system identification needs records with states".into()))?;
        if states.len() != r.controls.len() {
            return Err(Error::Dimension {
                what: "record states",
                expected: r.controls.len(),
                got: states.len(),
            });
        }
        for t in 0..states.len().saturating_sub(1) {
            if states[t].len() != learner.state_dim() || r.controls[t].len() != learner.control_dim() {
                return Err(Error::Dimension {
                    what: "record transition",
                    expected: learner.state_dim(),
                    got: states[t].len(),
                });
            }
            out.push(Transition {
                x: DVector::from_column_slice(&states[t]),
                u: DVector::from_column_slice(&r.controls[t]),
                next: DVector::from_column_slice(&states[t + 1]),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no transitions to fit".into()));
    }
    Ok(out)
}

/// Stacked residuals `x_{t+1} − f(x_t, u_t, θ)` and `∂f/∂θ`.
fn residuals(learner: &Problem, data: &[Transition], theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = learner.state_dim();
    let p = theta.len();
    let dynamics = learner.dynamics();
    let mut r = DVector::zeros(data.len() * n);
    let mut jac = DMatrix::zeros(data.len() * n, p);
    for (i, tr) in data.iter().enumerate() {
        let e = dynamics.linearize(&tr.x, &tr.u, theta)?;
        r.rows_mut(i * n, n).copy_from(&(&tr.next - &e.next_state));
        jac.view_mut((i * n, 0), (n, p)).copy_from(&e.df_dtheta);
    }
    if r.iter().chain(jac.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "transition residual", t: 0 });
    }
    Ok((r, jac))
}

/// Mean squared transition residual and its gradient in θ.
pub fn sysid_objective(learner: &Problem, records: &[ExpertRecord], theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let data = transitions(learner, records)?;
    let (r, jac) = residuals(learner, &data, theta)?;
    let count = data.len() as f64;
    Ok((r.norm_squared() / count, -(jac.tr_mul(&r)) * (2.0 / count)))
}

fn numerical_rank(jac: &DMatrix<f64>, tol: f64) -> usize {
    if jac.is_empty() {
        return 0;
    }
    let sv = jac.clone().svd(false, false).singular_values;
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > tol * top).count()
}

/// Fits the dynamics parameters to expert state transitions by damped
/// Gauss-Newton (Levenberg-Marquardt) on `Σ‖x_{t+1} − f(x_t, u_t, θ̂)‖²`.
pub fn sysid_fit(
    learner: &Problem,
    records: &[ExpertRecord],
    theta_init: &DVector<f64>,
    opts: &SysidOptions,
) -> Result<SysidResult> {
    let learner = learner.with_target(ParamTarget::Dynamics);
    if theta_init.len() != learner.param_dim() {
        return Err(Error::Dimension {
            what: "θ_init",
            expected: learner.param_dim(),
            got: theta_init.len(),
        });
    }
    let data = transitions(&learner, records)?;
    let count = data.len() as f64;
    let p = theta_init.len();
    let mut theta = theta_init.clone();
    let (mut r, mut jac) = residuals(&learner, &data, &theta)?;
    let initial_objective = r.norm_squared() / count;
    let mut objective = initial_objective;
    let mut mu = 1e-3;
    let mut iterations = 0;
    let mut converged = objective == 0.0;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let jtj = jac.tr_mul(&jac);
        let jtr = jac.tr_mul(&r);
        let scale = jtj.diagonal().max().max(f64::MIN_POSITIVE);
        let mut accepted = false;
        while mu < 1e12 {
            let mut lhs = jtj.clone();
            for i in 0..p {
                lhs[(i, i)] += mu * (jtj[(i, i)] + 1e-12 * scale);
            }
            let Some(step) = lhs.cholesky().map(|c| c.solve(&jtr)) else {
                mu *= 10.0;
                continue;
            };
            let trial = &theta + &step;
            match residuals(&learner, &data, &trial) {
                Ok((r2, j2)) if r2.norm_squared() / count <= objective => {
                    converged = step.amax() <= opts.step_tol * (1.0 + theta.amax());
                    theta = trial;
                    r = r2;
                    jac = j2;
                    objective = r.norm_squared() / count;
                    mu = (mu / 10.0).max(1e-12);
                    accepted = true;
                    break;
                }
                _ => mu *= 10.0,
            }
        }
        if !accepted {
            // No decrease possible at any damping: stationary to roundoff.
            converged = true;
        }
        converged |= objective == 0.0;
    }
    let rank = numerical_rank(&jac, opts.rank_tol);
    Ok(SysidResult {
        theta: theta.iter().copied().collect(),
        iterations,
        objective,
        initial_objective,
        rank,
        underdetermined: jac.nrows() < p || rank < p,
        converged,
    })
}
