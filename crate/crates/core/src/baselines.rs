//! Reference differentiation paths.
//!
//! * Unrolled sensitivities: forward-mode propagation of `dτ_i/dθ` through
//!   every recorded iteration, so the cost grows with the iteration count.
//! * Finite differences of a loss of the fully re-solved trajectory.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ilqr::{ilqr_solve_from, ilqr_solve_traced, IlqrOptions, IlqrResult, Trajectory};
use crate::implicit_diff::{absolute_subproblem, TrajectorySensitivities};
use crate::lqr::{stack, LqrDifferentiator, LqrProblem, LqrSolution, LqrTangent};
use crate::models::{Problem, StepEval};

/// One recorded iteration: its input trajectory, linearization, the LQR
/// subproblem in absolute coordinates with its solution, and the step size.
#[derive(Debug, Clone)]
pub struct TapeEntry {
    pub traj: Trajectory,
    pub evals: Vec<StepEval>,
    pub lqr: LqrProblem,
    pub lqr_solution: LqrSolution,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct UnrolledTape {
    pub entries: Vec<TapeEntry>,
    /// Linearization at the final iterate.
    pub final_evals: Vec<StepEval>,
}

impl UnrolledTape {
    pub fn iterations(&self) -> usize {
        self.entries.len()
    }
}

/// Runs exactly `iterations` iLQR iterations from `U⁰ ≡ 0` and records them.
pub fn record_tape(
    problem: &Problem,
    x_init: &DVector<f64>,
    iterations: usize,
    line_search: bool,
) -> Result<(IlqrResult, UnrolledTape)> {
    if iterations == 0 {
        return Err(Error::Config("unrolled differentiation needs at least one iteration".into()));
    }
    let opts = IlqrOptions {
        forced_iterations: Some(iterations),
        line_search,
        ..IlqrOptions::default()
    };
    let mut entries = Vec::with_capacity(iterations);
    let mut failure = None;
    let u0 = problem.bounds().clamp(&DVector::zeros(problem.control_dim()));
    let result = ilqr_solve_traced(problem, x_init, vec![u0; problem.horizon()], &opts, |out| {
        if failure.is_some() {
            return;
        }
        let traj = out.input.clone();
        match absolute_subproblem(problem, x_init, &traj, &out.evals) {
            Ok(lqr) => {
                let lqr_solution = shift_solution(&out.step, &traj);
                entries.push(TapeEntry {
                    traj,
                    evals: out.evals.clone(),
                    lqr,
                    lqr_solution,
                    alpha: out.alpha.unwrap_or(0.0),
                });
            }
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let final_evals = (0..problem.horizon())
        .map(|t| problem.eval_step(&result.traj.states[t], &result.traj.controls[t], t + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok((result, UnrolledTape { entries, final_evals }))
}

/// The step solution expressed in absolute coordinates around `traj`.
fn shift_solution(step: &LqrSolution, traj: &Trajectory) -> LqrSolution {
    let mut sol = step.clone();
    for t in 0..traj.horizon() {
        sol.states[t] += &traj.states[t];
        sol.controls[t] += &traj.controls[t];
    }
    sol
}

/// Rollout sensitivities along a linearization, given control sensitivities.
fn rollout_sensitivity(evals: &[StepEval], du: &DMatrix<f64>) -> DMatrix<f64> {
    let horizon = evals.len();
    let n = evals[0].dynamics.state_dim();
    let m = evals[0].dynamics.control_dim();
    let p = du.ncols();
    let mut dx = DMatrix::zeros(horizon * n, p);
    let mut z = DMatrix::zeros(n, p);
    for t in 0..horizon.saturating_sub(1) {
        let e = &evals[t].dynamics;
        let next = &e.a * &z + &e.b * du.rows(t * m, m) + &e.df_dtheta;
        dx.rows_mut((t + 1) * n, n).copy_from(&next);
        z = next;
    }
    dx
}

/// Pushes `dτ/dθ` through every recorded iteration.
pub fn propagate_tape(tape: &UnrolledTape) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let first = &tape.entries.first().ok_or(Error::Config("empty tape".into()))?.evals;
    let horizon = first.len();
    let n = first[0].dynamics.state_dim();
    let m = first[0].dynamics.control_dim();
    let k = n + m;
    let p = first[0].dynamics.df_dtheta.ncols();

    let mut du = DMatrix::zeros(horizon * m, p);
    let mut dx = rollout_sensitivity(first, &du);
    for (i, entry) in tape.entries.iter().enumerate() {
        let diff = LqrDifferentiator::new(&entry.lqr, &entry.lqr_solution)?;
        let mut next_du = &du * (1.0 - entry.alpha);
        for c in 0..p {
            let mut tan = LqrTangent {
                dynamics: Vec::with_capacity(horizon),
                offsets: Vec::with_capacity(horizon),
                hessians: Vec::with_capacity(horizon),
                gradients: Vec::with_capacity(horizon),
                x_init: DVector::zeros(n),
            };
            for t in 0..horizon {
                let e = &entry.evals[t];
                let tau = stack(&entry.traj.states[t], &entry.traj.controls[t]);
                let mut dtau = DVector::zeros(k);
                dtau.rows_mut(0, n).copy_from(&dx.view((t * n, c), (n, 1)));
                dtau.rows_mut(n, m).copy_from(&du.view((t * m, c), (m, 1)));
                let mut dd = e.dynamics.djac_dtheta[c].clone();
                let mut dc = e.cost.dhess_dtheta[c].clone();
                for j in 0..k {
                    if dtau[j] != 0.0 {
                        dd += e.dynamics.djac_dtau(j) * dtau[j];
                        dc += &e.cost.dhess_dtau[j] * dtau[j];
                    }
                }
                tan.offsets.push(e.dynamics.df_dtheta.column(c) - &dd * &tau);
                tan.gradients.push(e.cost.dgrad_dtheta.column(c) - &dc * &tau);
                tan.dynamics.push(dd);
                tan.hessians.push(dc);
            }
            let (_, dv) = diff.jvp(&tan);
            for t in 0..horizon {
                let mut col = next_du.view_mut((t * m, c), (m, 1));
                col += &dv[t] * entry.alpha;
            }
        }
        du = next_du;
        let evals = match tape.entries.get(i + 1) {
            Some(next) => &next.evals,
            None => &tape.final_evals,
        };
        dx = rollout_sensitivity(evals, &du);
    }
    Ok((dx, du))
}

/// Sensitivities of the iterate after exactly `iterations` iterations.
///
/// `condition` and `residual` are not meaningful here and are set to NaN.
pub fn unrolled_sensitivities(
    problem: &Problem,
    x_init: &DVector<f64>,
    iterations: usize,
) -> Result<(IlqrResult, TrajectorySensitivities)> {
    let (result, tape) = record_tape(problem, x_init, iterations, true)?;
    let (dx, du) = propagate_tape(&tape)?;
    let degenerate = tape.entries.iter().any(|e| e.lqr_solution.degenerate);
    Ok((
        result,
        TrajectorySensitivities {
            dx,
            du,
            condition: f64::NAN,
            residual: f64::NAN,
            degenerate,
            warnings: Vec::new(),
        },
    ))
}

/// Central-difference gradient of `loss(τ★(θ))`.
///
/// Parameter `j` is perturbed by `h·|θ_j|` (or `h` when `θ_j = 0`); each
/// perturbed solve is warm-started from `warm_start` when given.
pub fn finite_diff_gradient(
    problem: &Problem,
    x_init: &DVector<f64>,
    loss: &(dyn Fn(&Trajectory) -> f64 + Sync),
    h: f64,
    opts: &IlqrOptions,
    warm_start: Option<&[DVector<f64>]>,
) -> Result<DVector<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let theta = problem.theta();
    let start = match warm_start {
        Some(u) => u.to_vec(),
        None => vec![DVector::zeros(problem.control_dim()); problem.horizon()],
    };
    let eval = |j: usize, sign: f64| -> Result<f64> {
        let step = h * if theta[j] != 0.0 { theta[j].abs() } else { 1.0 };
        let mut th = theta.clone();
        th[j] += sign * step;
        let res = problem
            .with_theta(&th)
            .and_then(|p| ilqr_solve_from(&p, x_init, start.clone(), opts))
            .map_err(|e| Error::Perturbed {
                index: j,
                source: Box::new(e),
            })?;
        if !res.converged {
            return Err(Error::Perturbed {
                index: j,
                source: Box::new(Error::NotConverged {
                    iterations: res.iterations,
                    residual: res.residual,
                }),
            });
        }
        Ok(loss(&res.traj))
    };
    let grads = (0..theta.len())
        .into_par_iter()
        .map(|j| {
            let step = h * if theta[j] != 0.0 { theta[j].abs() } else { 1.0 };
            Ok((eval(j, 1.0)? - eval(j, -1.0)?) / (2.0 * step))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DVector::from_vec(grads))
}
