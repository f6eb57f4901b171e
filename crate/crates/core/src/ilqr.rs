//! The iLQR fixed-point iteration.
//!
//! One iteration linearizes the dynamics and quadraticizes the cost around
//! the current trajectory, solves the box-constrained LQR subproblem for the
//! step `δτ★`, sets `u ← u + α·δu★` and re-rolls the states through the true
//! dynamics. The trajectory is converged once the full LQR step satisfies
//! `max_t ‖δu★_t‖∞ ≤ fp_tol`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqr::{self, ActiveSet, LqrProblem, LqrSolution};
use crate::models::{Problem, StepEval};

/// Line-search steps tried in order: 1, 1/2, …, 2⁻¹⁰.
pub const LINE_SEARCH_STEPS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IlqrOptions {
    pub fp_tol: f64,
    pub max_iter: usize,
    pub line_search: bool,
    /// Run exactly this many iterations, ignoring the convergence test.
    pub forced_iterations: Option<usize>,
}

impl Default for IlqrOptions {
    fn default() -> Self {
        Self {
            fp_tol: 1e-8,
            max_iter: 200,
            line_search: true,
            forced_iterations: None,
        }
    }
}

/// State and control sequences `x_1..x_T`, `u_1..u_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    /// Rolls `controls` out from `x_init` through the problem's dynamics.
    pub fn rollout(problem: &Problem, x_init: &DVector<f64>, controls: Vec<DVector<f64>>) -> Result<Self> {
        if controls.len() != problem.horizon() {
            return Err(Error::Dimension {
                what: "control sequence",
                expected: problem.horizon(),
                got: controls.len(),
            });
        }
        if x_init.len() != problem.state_dim() {
            return Err(Error::Dimension {
                what: "initial state",
                expected: problem.state_dim(),
                got: x_init.len(),
            });
        }
        let mut states = Vec::with_capacity(controls.len());
        let mut x = x_init.clone();
        for (t, u) in controls.iter().enumerate() {
            if u.len() != problem.control_dim() {
                return Err(Error::Dimension {
                    what: "control",
                    expected: problem.control_dim(),
                    got: u.len(),
                });
            }
            let next = problem.step(&x, u);
            states.push(x);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "rollout", t: t + 1 });
            }
            x = next;
        }
        Ok(Self { states, controls })
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// `(x_1, …, x_T, u_1, …, u_T)` as one vector.
    pub fn to_stacked(&self) -> DVector<f64> {
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.controls.first().map_or(0, |u| u.len());
        let horizon = self.horizon();
        let mut out = DVector::zeros(horizon * (n + m));
        for t in 0..horizon {
            out.rows_mut(t * n, n).copy_from(&self.states[t]);
            out.rows_mut(horizon * n + t * m, m).copy_from(&self.controls[t]);
        }
        out
    }

    pub fn from_stacked(v: &DVector<f64>, horizon: usize, n: usize, m: usize) -> Self {
        Self {
            states: (0..horizon).map(|t| v.rows(t * n, n).into_owned()).collect(),
            controls: (0..horizon)
                .map(|t| v.rows(horizon * n + t * m, m).into_owned())
                .collect(),
        }
    }

    /// Stacked controls `(u_1, …, u_T)`.
    pub fn stacked_controls(&self) -> DVector<f64> {
        let m = self.controls.first().map_or(0, |u| u.len());
        DVector::from_iterator(self.horizon() * m, self.controls.iter().flat_map(|u| u.iter().copied()))
    }

    /// Largest dynamics defect `‖f(x_t, u_t) − x_{t+1}‖∞`.
    pub fn defect(&self, problem: &Problem) -> f64 {
        (0..self.horizon().saturating_sub(1))
            .map(|t| (problem.step(&self.states[t], &self.controls[t]) - &self.states[t + 1]).amax())
            .fold(0.0, f64::max)
    }
}

/// Total cost `Σ_t g_t(x_t, u_t)`.
pub fn trajectory_cost(problem: &Problem, traj: &Trajectory) -> f64 {
    (0..traj.horizon())
        .map(|t| problem.stage_cost(&traj.states[t], &traj.controls[t], t + 1))
        .sum()
}

/// The LQR subproblem around `traj`, written in the step `δτ = τ' − τ`.
///
/// Dynamics defects `f(τ_t) − x_{t+1}` and `x_init − x_1` enter as offsets,
/// so the subproblem is well defined for infeasible trajectories too. Its
/// solution added to `traj` is the same for both readings.
pub fn step_subproblem(
    problem: &Problem,
    x_init: &DVector<f64>,
    traj: &Trajectory,
) -> Result<(LqrProblem, Vec<StepEval>)> {
    let horizon = problem.horizon();
    let n = problem.state_dim();
    let mut evals = Vec::with_capacity(horizon);
    let mut dynamics = Vec::with_capacity(horizon);
    let mut offsets = Vec::with_capacity(horizon);
    let mut hessians = Vec::with_capacity(horizon);
    let mut gradients = Vec::with_capacity(horizon);
    let mut lower = Vec::with_capacity(horizon);
    let mut upper = Vec::with_capacity(horizon);
    let bounds = problem.bounds();
    for t in 0..horizon {
        let e = problem.eval_step(&traj.states[t], &traj.controls[t], t + 1)?;
        dynamics.push(e.dynamics.jacobian());
        offsets.push(if t + 1 < horizon {
            &e.dynamics.next_state - &traj.states[t + 1]
        } else {
            DVector::zeros(n)
        });
        hessians.push(e.cost.hess.clone());
        gradients.push(e.cost.grad.clone());
        lower.push(&bounds.lower - &traj.controls[t]);
        upper.push(&bounds.upper - &traj.controls[t]);
        evals.push(e);
    }
    let prob = LqrProblem::new(
        dynamics,
        offsets,
        hessians,
        gradients,
        x_init - &traj.states[0],
        lower,
        upper,
    )?;
    Ok((prob, evals))
}

/// Output of one iteration.
#[derive(Debug, Clone)]
pub struct IterationOutput {
    /// Trajectory the iteration started from.
    pub input: Trajectory,
    pub traj: Trajectory,
    /// Step subproblem and its solution at the input trajectory.
    pub subproblem: LqrProblem,
    pub step: LqrSolution,
    pub evals: Vec<StepEval>,
    /// Accepted step size, `None` if the line search found no decrease
    /// (then `traj` is the input trajectory).
    pub alpha: Option<f64>,
    /// `max_t ‖δu★_t‖∞` of the full LQR step.
    pub residual: f64,
    pub cost_before: f64,
    pub cost_after: f64,
}

/// One iLQR iteration from `traj`. Without line search the full step is
/// always taken, which makes this the map `(X, U) ↦ (F, G)` whose fixed
/// points are the converged trajectories.
pub fn iteration_map(
    problem: &Problem,
    x_init: &DVector<f64>,
    traj: &Trajectory,
    line_search: bool,
) -> Result<IterationOutput> {
    let (subproblem, evals) = step_subproblem(problem, x_init, traj)?;
    let step = lqr::solve(&subproblem)?;
    let residual = step.controls.iter().map(|v| v.amax()).fold(0.0, f64::max);
    let cost_before = trajectory_cost(problem, traj);
    let bounds = problem.bounds();

    let mut alpha = 1.0;
    for _ in 0..LINE_SEARCH_STEPS {
        let controls: Vec<DVector<f64>> = traj
            .controls
            .iter()
            .zip(&step.controls)
            .map(|(u, du)| bounds.clamp(&(u + du * alpha)))
            .collect();
        let candidate = Trajectory::rollout(problem, x_init, controls);
        let candidate = match candidate {
            Ok(c) => c,
            Err(Error::NonFinite { .. }) if line_search => {
                alpha *= 0.5;
                continue;
            }
            Err(e) => return Err(e),
        };
        let cost_after = trajectory_cost(problem, &candidate);
        let slack = 1e-12 * cost_before.abs().max(1.0);
        if !line_search || cost_after <= cost_before + slack {
            return Ok(IterationOutput {
                input: traj.clone(),
                traj: candidate,
                subproblem,
                step,
                evals,
                alpha: Some(alpha),
                residual,
                cost_before,
                cost_after,
            });
        }
        alpha *= 0.5;
    }
    Ok(IterationOutput {
        input: traj.clone(),
        traj: traj.clone(),
        subproblem,
        step,
        evals,
        alpha: None,
        residual,
        cost_before,
        cost_after: cost_before,
    })
}

#[derive(Debug, Clone)]
pub struct IlqrResult {
    pub traj: Trajectory,
    pub x_init: DVector<f64>,
    /// Gains `K_t` of the last LQR step; rows of clamped controls are zero.
    pub feedback: Vec<DMatrix<f64>>,
    pub feedforward: Vec<DVector<f64>>,
    pub active: ActiveSet,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub cost: f64,
    /// The last LQR step had a bound with a vanishing multiplier.
    pub degenerate: bool,
}

impl IlqrResult {
    /// Fails with [`Error::NotConverged`] unless the result is converged.
    pub fn require_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
                residual: self.residual,
            })
        }
    }
}

/// Solves from `U⁰ ≡ 0` clipped to the bounds.
pub fn ilqr_solve(problem: &Problem, x_init: &DVector<f64>, opts: &IlqrOptions) -> Result<IlqrResult> {
    let u0 = problem.bounds().clamp(&DVector::zeros(problem.control_dim()));
    ilqr_solve_from(problem, x_init, vec![u0; problem.horizon()], opts)
}

/// Solves starting from the given controls (clipped to the bounds).
pub fn ilqr_solve_from(
    problem: &Problem,
    x_init: &DVector<f64>,
    controls: Vec<DVector<f64>>,
    opts: &IlqrOptions,
) -> Result<IlqrResult> {
    ilqr_solve_traced(problem, x_init, controls, opts, |_| {})
}

/// Like [`ilqr_solve_from`], calling `on_iteration` after every iteration.
pub fn ilqr_solve_traced(
    problem: &Problem,
    x_init: &DVector<f64>,
    controls: Vec<DVector<f64>>,
    opts: &IlqrOptions,
    mut on_iteration: impl FnMut(&IterationOutput),
) -> Result<IlqrResult> {
    if !(opts.fp_tol > 0.0) {
        return Err(Error::Config("fp_tol must be positive".into()));
    }
    let bounds = problem.bounds();
    let controls = controls.iter().map(|u| bounds.clamp(u)).collect();
    let mut traj = Trajectory::rollout(problem, x_init, controls)?;
    let budget = opts.forced_iterations.unwrap_or(opts.max_iter);
    if budget == 0 {
        return Err(Error::Config("iteration budget must be at least 1".into()));
    }

    let mut last: Option<IterationOutput> = None;
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..budget {
        let out = iteration_map(problem, x_init, &traj, opts.line_search)?;
        iterations += 1;
        on_iteration(&out);
        traj = out.traj.clone();
        converged = out.residual <= opts.fp_tol;
        let stalled = out.alpha.is_none();
        last = Some(out);
        if opts.forced_iterations.is_none() && (converged || stalled) {
            break;
        }
    }
    let last = last.expect("at least one iteration");
    Ok(IlqrResult {
        cost: trajectory_cost(problem, &traj),
        traj,
        x_init: x_init.clone(),
        feedback: last.step.feedback,
        feedforward: last.step.feedforward,
        active: last.step.active,
        iterations,
        residual: last.residual,
        converged,
        degenerate: last.step.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{default_problem, ParamTarget};

    #[test]
    fn linear_quadratic_instance_converges_in_two_iterations() {
        let prob = default_problem("linear-test", 8, ParamTarget::Dynamics).unwrap();
        let x0 = DVector::from_vec(vec![0.7, -0.4]);
        let res = ilqr_solve(&prob, &x0, &IlqrOptions::default()).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 2);
    }

    #[test]
    fn start_at_goal_is_already_optimal() {
        let prob = default_problem("pendulum", 10, ParamTarget::Dynamics).unwrap();
        let res = ilqr_solve(&prob, &DVector::zeros(2), &IlqrOptions::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        assert!(res.traj.controls.iter().all(|u| u.amax() < 1e-12));
    }

    #[test]
    fn controls_stay_within_bounds() {
        let prob = default_problem("pendulum", 15, ParamTarget::Dynamics).unwrap();
        let res = ilqr_solve(&prob, &DVector::from_vec(vec![2.5, 0.5]), &IlqrOptions::default()).unwrap();
        assert!(res.traj.controls.iter().all(|u| prob.bounds().contains(u)));
    }

    #[test]
    fn stacking_round_trips() {
        let prob = default_problem("cartpole", 4, ParamTarget::Dynamics).unwrap();
        let traj = Trajectory::rollout(
            &prob,
            &DVector::from_vec(vec![0.1, 0.0, 0.2, 0.0]),
            vec![DVector::from_element(1, 0.5); 4],
        )
        .unwrap();
        let v = traj.to_stacked();
        assert_eq!(Trajectory::from_stacked(&v, 4, 4, 1), traj);
    }

    #[test]
    fn forced_mode_runs_exactly_the_requested_iterations() {
        let prob = default_problem("pendulum", 5, ParamTarget::Dynamics).unwrap();
        let opts = IlqrOptions {
            forced_iterations: Some(7),
            ..IlqrOptions::default()
        };
        let mut seen = 0;
        let u0 = vec![DVector::zeros(1); 5];
        let res = ilqr_solve_traced(&prob, &DVector::from_vec(vec![0.4, 0.0]), u0, &opts, |_| seen += 1).unwrap();
        assert_eq!(res.iterations, 7);
        assert_eq!(seen, 7);
    }
}
