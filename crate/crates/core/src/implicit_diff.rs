//! Sensitivities of a converged iLQR trajectory with respect to θ.
//!
//! At a fixed point `X = F(X, U, θ)`, `U = G(X, U, θ)` of the iteration map,
//! differentiating both identities gives the linear system
//!
//! ```text
//!   (I − F_X)·∇X − F_U·∇U = F_θ
//!   −G_X·∇X + (I − G_U)·∇U = G_θ
//! ```
//!
//! whose solution is independent of how many iterations produced the fixed
//! point. `G` is the control output of the LQR subproblem written in
//! absolute coordinates (coefficients `D_t`, `d_t = f_t − D_t·τ_t`, `C_t`,
//! `c_t − C_t·τ_t`), and `F` rolls those controls through the true dynamics.
//! The Jacobians of `G` are contracted from unit-seed LQR gradients with the
//! per-step derivative blocks `∂D_t/∂τ_t`, `∂C_t/∂τ_t`; no dense
//! trajectory-sized derivative tensor is ever formed.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ilqr::{ilqr_solve, IlqrOptions, IlqrResult, Trajectory};
use crate::lqr::{self, stack, BatchPolicy, LqrDifferentiator, LqrProblem, LqrSolution, TrajCotangent};
use crate::models::{Problem, StepEval};

/// Condition estimates above this attach a warning to the result.
pub const CONDITION_WARNING: f64 = 1e12;

/// How much of the iteration map is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffMode {
    /// Full fixed-point system.
    #[default]
    Full,
    /// Treat the input trajectory of the last iteration as a constant:
    /// `∇X = F_θ`, `∇U = G_θ`.
    LastLayer,
}

impl std::str::FromStr for DiffMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(DiffMode::Full),
            "last-layer" => Ok(DiffMode::LastLayer),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected full or last-layer)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DiffOptions {
    pub mode: DiffMode,
    pub batch: BatchPolicy,
}

/// Control sensitivity used by [`forward_algorithm`].
#[derive(Debug, Clone, Copy)]
pub enum ControlLaw<'a> {
    /// `∇u_t = K_t·∇x_t` with the LQR feedback gains.
    Feedback,
    /// `∇u_t` taken from solved sensitivities.
    Exact(&'a TrajectorySensitivities),
}

/// Total θ-derivatives carried through one time step.
#[derive(Debug, Clone)]
pub struct SensitivityState {
    /// 1-based time index.
    pub t: usize,
    /// `∇x_t`, n×p.
    pub dx: DMatrix<f64>,
    /// `∇u_t`, m×p.
    pub du: DMatrix<f64>,
    /// `∇D_t`, one n×(n+m) block per parameter.
    pub d_dynamics: Vec<DMatrix<f64>>,
    /// `∇d_t` for `d_t = f_t − D_t·τ_t`, n×p.
    pub d_offset: DMatrix<f64>,
    /// `∇C_t`, one block per parameter.
    pub d_hessian: Vec<DMatrix<f64>>,
    /// `∇c_t`, (n+m)×p.
    pub d_gradient: DMatrix<f64>,
}

/// Everything evaluated along the fixed point by [`forward_algorithm`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub traj: Trajectory,
    pub evals: Vec<StepEval>,
    /// The LQR subproblem in absolute coordinates and its solution.
    pub lqr: LqrProblem,
    pub lqr_solution: LqrSolution,
    pub states: Vec<SensitivityState>,
}

/// Stacked Jacobians of one iteration at the fixed point.
#[derive(Debug, Clone)]
pub struct FixedPointSystem {
    pub f_x: DMatrix<f64>,
    pub f_u: DMatrix<f64>,
    pub f_theta: DMatrix<f64>,
    pub g_x: DMatrix<f64>,
    pub g_u: DMatrix<f64>,
    pub g_theta: DMatrix<f64>,
    pub mode: DiffMode,
    /// The LQR solution had a bound with a vanishing multiplier.
    pub degenerate: bool,
    /// Number of floats held for the `∂D_t/∂τ_t`, `∂C_t/∂τ_t` blocks.
    pub block_storage: usize,
}

#[derive(Debug, Clone)]
pub struct TrajectorySensitivities {
    /// `∇X★`, (Tn)×p.
    pub dx: DMatrix<f64>,
    /// `∇U★`, (Tm)×p.
    pub du: DMatrix<f64>,
    /// Largest of the condition estimates of `I − F_X` and the Schur complement.
    pub condition: f64,
    /// Relative residual of the fixed-point linear system.
    pub residual: f64,
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

impl TrajectorySensitivities {
    /// `(∇X★; ∇U★)` stacked like [`Trajectory::to_stacked`].
    pub fn stacked(&self) -> DMatrix<f64> {
        let (a, b, p) = (self.dx.nrows(), self.du.nrows(), self.dx.ncols());
        let mut out = DMatrix::zeros(a + b, p);
        out.rows_mut(0, a).copy_from(&self.dx);
        out.rows_mut(a, b).copy_from(&self.du);
        out
    }
}

/// LQR subproblem at `traj` in absolute coordinates.
pub fn absolute_subproblem(
    problem: &Problem,
    x_init: &DVector<f64>,
    traj: &Trajectory,
    evals: &[StepEval],
) -> Result<LqrProblem> {
    let horizon = problem.horizon();
    let bounds = problem.bounds();
    let mut dynamics = Vec::with_capacity(horizon);
    let mut offsets = Vec::with_capacity(horizon);
    let mut hessians = Vec::with_capacity(horizon);
    let mut gradients = Vec::with_capacity(horizon);
    for (t, e) in evals.iter().enumerate() {
        let tau = stack(&traj.states[t], &traj.controls[t]);
        let d = e.dynamics.jacobian();
        offsets.push(&e.dynamics.next_state - &d * &tau);
        gradients.push(&e.cost.grad - &e.cost.hess * &tau);
        dynamics.push(d);
        hessians.push(e.cost.hess.clone());
    }
    LqrProblem::new(
        dynamics,
        offsets,
        hessians,
        gradients,
        x_init.clone(),
        vec![bounds.lower.clone(); horizon],
        vec![bounds.upper.clone(); horizon],
    )
}

fn contract(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Single forward sweep along the converged trajectory computing
/// `∇x_t`, `∇D_t`, `∇d_t`, `∇C_t`, `∇c_t` from `∇x_1 = 0`.
pub fn forward_algorithm(problem: &Problem, result: &IlqrResult, law: ControlLaw<'_>) -> Result<ForwardTrace> {
    result.require_converged()?;
    let horizon = problem.horizon();
    if result.traj.horizon() != horizon {
        return Err(Error::Dimension {
            what: "trajectory horizon",
            expected: horizon,
            got: result.traj.horizon(),
        });
    }
    let (n, m, p) = (problem.state_dim(), problem.control_dim(), problem.param_dim());
    let k = n + m;
    if let ControlLaw::Exact(s) = law {
        if s.du.shape() != (horizon * m, p) {
            return Err(Error::Dimension {
                what: "control sensitivities",
                expected: horizon * m,
                got: s.du.nrows(),
            });
        }
    }
    let traj = result.traj.clone();
    let evals = (0..horizon)
        .map(|t| problem.eval_step(&traj.states[t], &traj.controls[t], t + 1))
        .collect::<Result<Vec<_>>>()?;
    let lqr = absolute_subproblem(problem, &result.x_init, &traj, &evals)?;
    let lqr_solution = lqr::solve_from(&lqr, result.active.clone())?;

    let mut states = Vec::with_capacity(horizon);
    let mut dx = DMatrix::zeros(n, p);
    for (t, e) in evals.iter().enumerate() {
        let du = match law {
            ControlLaw::Feedback => &lqr_solution.feedback[t] * &dx,
            ControlLaw::Exact(s) => s.du.rows(t * m, m).into_owned(),
        };
        let mut dtau = DMatrix::zeros(k, p);
        dtau.rows_mut(0, n).copy_from(&dx);
        dtau.rows_mut(n, m).copy_from(&du);
        let tau = stack(&traj.states[t], &traj.controls[t]);

        let mut d_dynamics = Vec::with_capacity(p);
        let mut d_hessian = Vec::with_capacity(p);
        let mut d_offset = e.dynamics.df_dtheta.clone();
        for i in 0..p {
            let mut dd = e.dynamics.djac_dtheta[i].clone();
            let mut dc = e.cost.dhess_dtheta[i].clone();
            for j in 0..k {
                let w = dtau[(j, i)];
                if w != 0.0 {
                    dd += e.dynamics.djac_dtau(j) * w;
                    dc += &e.cost.dhess_dtau[j] * w;
                }
            }
            let col = &dd * &tau;
            for r in 0..n {
                d_offset[(r, i)] -= col[r];
            }
            d_dynamics.push(dd);
            d_hessian.push(dc);
        }
        let d_gradient = &e.cost.dgrad_dtheta + &e.cost.hess * &dtau;
        let next_dx = &e.dynamics.df_dtheta + e.dynamics.jacobian() * &dtau;
        states.push(SensitivityState {
            t: t + 1,
            dx,
            du,
            d_dynamics,
            d_offset,
            d_hessian,
            d_gradient,
        });
        dx = next_dx;
    }
    Ok(ForwardTrace {
        traj,
        evals,
        lqr,
        lqr_solution,
        states,
    })
}

/// Rollout sensitivities: `Z_1 = 0`, `Z_{t+1} = A_t·Z_t + B_t·W_t (+ ∂f_t/∂θ)`.
fn propagate(evals: &[StepEval], w: Option<&DMatrix<f64>>, with_theta: bool, cols: usize) -> DMatrix<f64> {
    let horizon = evals.len();
    let n = evals[0].dynamics.state_dim();
    let m = evals[0].dynamics.control_dim();
    let mut out = DMatrix::zeros(horizon * n, cols);
    let mut z = DMatrix::zeros(n, cols);
    for t in 0..horizon.saturating_sub(1) {
        let e = &evals[t].dynamics;
        let mut next = &e.a * &z;
        if let Some(w) = w {
            next += &e.b * w.rows(t * m, m);
        }
        if with_theta {
            next += &e.df_dtheta;
        }
        out.rows_mut((t + 1) * n, n).copy_from(&next);
        z = next;
    }
    out
}

/// Assembles `F_X, F_U, F_θ, G_X, G_U, G_θ` at the fixed point.
pub fn assemble_fixed_point_system(trace: &ForwardTrace, opts: &DiffOptions) -> Result<FixedPointSystem> {
    let evals = &trace.evals;
    let horizon = evals.len();
    let n = evals[0].dynamics.state_dim();
    let m = evals[0].dynamics.control_dim();
    let p = evals[0].dynamics.df_dtheta.ncols();
    let k = n + m;
    let diff = LqrDifferentiator::new(&trace.lqr, &trace.lqr_solution)?;
    let taus: Vec<DVector<f64>> = (0..horizon)
        .map(|t| stack(&trace.traj.states[t], &trace.traj.controls[t]))
        .collect();
    let full = opts.mode == DiffMode::Full;

    // Row r of G_X, G_U, G_θ from the unit seed on control component r.
    let row = |r: usize| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let g = diff.grad(&TrajCotangent::unit(horizon, n, m, horizon * n + r));
        let mut gx = vec![0.0; horizon * n];
        let mut gu = vec![0.0; horizon * m];
        let mut gth = vec![0.0; p];
        for s in 0..horizon {
            let e = &evals[s];
            let pd = &g.dynamics[s] - &g.offsets[s] * taus[s].transpose();
            let pc = &g.hessians[s] - &g.gradients[s] * taus[s].transpose();
            if full {
                for j in 0..k {
                    let v = contract(&pd, e.dynamics.djac_dtau(j)) + contract(&pc, &e.cost.dhess_dtau[j]);
                    if j < n {
                        gx[s * n + j] = v;
                    } else {
                        gu[s * m + j - n] = v;
                    }
                }
            }
            for (i, acc) in gth.iter_mut().enumerate() {
                *acc += contract(&pd, &e.dynamics.djac_dtheta[i])
                    + g.offsets[s].dot(&e.dynamics.df_dtheta.column(i))
                    + contract(&pc, &e.cost.dhess_dtheta[i])
                    + g.gradients[s].dot(&e.cost.dgrad_dtheta.column(i));
            }
        }
        (gx, gu, gth)
    };
    let parallel = match opts.batch {
        BatchPolicy::Auto => horizon >= lqr::PARALLEL_MIN_HORIZON,
        BatchPolicy::Sequential => false,
        BatchPolicy::Parallel => true,
    };
    let rows: Vec<_> = if parallel {
        (0..horizon * m).into_par_iter().map(row).collect()
    } else {
        (0..horizon * m).map(row).collect()
    };

    let mut g_x = DMatrix::zeros(horizon * m, horizon * n);
    let mut g_u = DMatrix::zeros(horizon * m, horizon * m);
    let mut g_theta = DMatrix::zeros(horizon * m, p);
    for (r, (gx, gu, gth)) in rows.into_iter().enumerate() {
        g_x.row_mut(r).copy_from_slice(&gx);
        g_u.row_mut(r).copy_from_slice(&gu);
        g_theta.row_mut(r).copy_from_slice(&gth);
    }

    let f_x = propagate(evals, Some(&g_x), false, horizon * n);
    let f_u = propagate(evals, Some(&g_u), false, horizon * m);
    let f_theta = propagate(evals, Some(&g_theta), true, p);
    let block_storage = evals
        .iter()
        .map(|e| {
            e.dynamics.djac_dx.iter().chain(&e.dynamics.djac_du).map(|b| b.len()).sum::<usize>()
                + e.cost.dhess_dtau.iter().map(|b| b.len()).sum::<usize>()
        })
        .sum();
    Ok(FixedPointSystem {
        f_x,
        f_u,
        f_theta,
        g_x,
        g_u,
        g_theta,
        mode: opts.mode,
        degenerate: trace.lqr_solution.degenerate,
        block_storage,
    })
}

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    match a.clone().try_inverse() {
        Some(inv) => norm1(a) * norm1(&inv),
        None => f64::INFINITY,
    }
}

/// Relative residual of both block rows of the fixed-point system.
pub fn system_residual(sys: &FixedPointSystem, dx: &DMatrix<f64>, du: &DMatrix<f64>) -> f64 {
    let r1 = dx - &sys.f_x * dx - &sys.f_u * du - &sys.f_theta;
    let r2 = du - &sys.g_x * dx - &sys.g_u * du - &sys.g_theta;
    let scale = 1.0
        + sys.f_theta.amax().max(sys.g_theta.amax())
        + dx.amax().max(du.amax()) * (1.0 + sys.f_x.amax().max(sys.f_u.amax()).max(sys.g_x.amax()).max(sys.g_u.amax()));
    r1.amax().max(r2.amax()) / scale
}

/// Closed-form solution with `M = (I − F_X)⁻¹`, `K_op = I − G_U`:
///
/// `∇U = (K_op − G_X·M·F_U)⁻¹·(G_X·M·F_θ + G_θ)`, `∇X = M·(F_θ + F_U·∇U)`.
pub fn solve_sensitivities(sys: &FixedPointSystem) -> Result<TrajectorySensitivities> {
    let tn = sys.f_x.nrows();
    let tm = sys.g_u.nrows();
    let i_fx = DMatrix::identity(tn, tn) - &sys.f_x;
    let cond_m = condition_estimate(&i_fx);
    let lu_m = i_fx.lu();
    let m_fu = lu_m.solve(&sys.f_u).ok_or(Error::Singular {
        what: "I − F_X",
        condition: cond_m,
    })?;
    let m_fth = lu_m.solve(&sys.f_theta).ok_or(Error::Singular {
        what: "I − F_X",
        condition: cond_m,
    })?;
    let schur = DMatrix::identity(tm, tm) - &sys.g_u - &sys.g_x * &m_fu;
    let cond_s = condition_estimate(&schur);
    let rhs = &sys.g_x * &m_fth + &sys.g_theta;
    let du = schur.lu().solve(&rhs).ok_or(Error::Singular {
        what: "K_op − G_X·M·F_U",
        condition: cond_s,
    })?;
    let dx = m_fth + m_fu * &du;

    let mut warnings = Vec::new();
    for (what, c) in [("I − F_X", cond_m), ("K_op − G_X·M·F_U", cond_s)] {
        if !(c <= CONDITION_WARNING) {
            warnings.push(format!("{what} is ill-conditioned (estimate {c:e})"));
        }
    }
    if sys.degenerate {
        warnings.push("a control sits on its bound with zero multiplier; gradients are one-sided".into());
    }
    if cfg!(debug_assertions) {
        let (dx2, du2) = solve_sensitivities_direct(sys)?;
        let scale = dx2.amax().max(du2.amax()).max(1e-300);
        let gap = (&dx - dx2).amax().max((&du - du2).amax()) / scale;
        if gap > 1e-8 * (1.0 + cond_m.max(cond_s) * f64::EPSILON) {
            warnings.push(format!("closed form and direct block solve differ by {gap:e}"));
        }
    }
    let residual = system_residual(sys, &dx, &du);
    Ok(TrajectorySensitivities {
        dx,
        du,
        condition: cond_m.max(cond_s),
        residual,
        degenerate: sys.degenerate,
        warnings,
    })
}

/// Solves the two-block system as one dense linear system.
pub fn solve_sensitivities_direct(sys: &FixedPointSystem) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let tn = sys.f_x.nrows();
    let tm = sys.g_u.nrows();
    let p = sys.f_theta.ncols();
    let mut a = DMatrix::identity(tn + tm, tn + tm);
    let blocks = [
        ((0, 0), &sys.f_x),
        ((0, tn), &sys.f_u),
        ((tn, 0), &sys.g_x),
        ((tn, tn), &sys.g_u),
    ];
    for (at, blk) in blocks {
        let mut view = a.view_mut(at, blk.shape());
        view -= blk;
    }
    let mut b = DMatrix::zeros(tn + tm, p);
    b.rows_mut(0, tn).copy_from(&sys.f_theta);
    b.rows_mut(tn, tm).copy_from(&sys.g_theta);
    let cond = condition_estimate(&a);
    let sol = a.lu().solve(&b).ok_or(Error::Singular {
        what: "fixed-point system",
        condition: cond,
    })?;
    Ok((sol.rows(0, tn).into_owned(), sol.rows(tn, tm).into_owned()))
}

/// `dL/dθ = ∇X★ᵀ·∂L/∂X + ∇U★ᵀ·∂L/∂U` for a cotangent stacked as `(X, U)`.
pub fn vjp(cotangent: &DVector<f64>, sens: &TrajectorySensitivities) -> Result<DVector<f64>> {
    let tn = sens.dx.nrows();
    let tm = sens.du.nrows();
    if cotangent.len() != tn + tm {
        return Err(Error::Dimension {
            what: "trajectory cotangent",
            expected: tn + tm,
            got: cotangent.len(),
        });
    }
    Ok(sens.dx.tr_mul(&cotangent.rows(0, tn)) + sens.du.tr_mul(&cotangent.rows(tn, tm)))
}

/// Backward stage for a converged result: forward sweep, assembly, solve.
/// Its cost does not depend on how many iterations produced `result`.
pub fn implicit_backward(problem: &Problem, result: &IlqrResult, opts: &DiffOptions) -> Result<TrajectorySensitivities> {
    let trace = forward_algorithm(problem, result, ControlLaw::Feedback)?;
    let sys = assemble_fixed_point_system(&trace, opts)?;
    solve_sensitivities(&sys)
}

/// Solves the control problem and differentiates its solution.
pub fn grad_trajectory(
    problem: &Problem,
    x_init: &DVector<f64>,
    ilqr_opts: &IlqrOptions,
    opts: &DiffOptions,
) -> Result<(IlqrResult, TrajectorySensitivities)> {
    let result = ilqr_solve(problem, x_init, ilqr_opts)?;
    let sens = implicit_backward(problem, &result, opts)?;
    Ok((result, sens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{default_problem, ParamTarget};

    fn random_system(tn: usize, tm: usize, p: usize, seed: u64) -> FixedPointSystem {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-s..s));
        FixedPointSystem {
            f_x: mat(tn, tn, 0.2),
            f_u: mat(tn, tm, 1.0),
            f_theta: mat(tn, p, 1.0),
            g_x: mat(tm, tn, 0.2),
            g_u: mat(tm, tm, 0.2),
            g_theta: mat(tm, p, 1.0),
            mode: DiffMode::Full,
            degenerate: false,
            block_storage: 0,
        }
    }

    #[test]
    fn decoupled_system_reduces_to_direct_terms() {
        let mut sys = random_system(6, 3, 2, 1);
        sys.f_x.fill(0.0);
        sys.g_x.fill(0.0);
        sys.g_u.fill(0.0);
        let s = solve_sensitivities(&sys).unwrap();
        assert!((&s.du - &sys.g_theta).amax() < 1e-14);
        assert!((&s.dx - (&sys.f_theta + &sys.f_u * &sys.g_theta)).amax() < 1e-13);
    }

    #[test]
    fn closed_form_matches_direct_solve() {
        for seed in 0..5 {
            let sys = random_system(6, 3, 2, seed);
            let s = solve_sensitivities(&sys).unwrap();
            let (dx, du) = solve_sensitivities_direct(&sys).unwrap();
            assert!((&s.dx - dx).amax() < 1e-10);
            assert!((&s.du - du).amax() < 1e-10);
            assert!(s.residual < 1e-12);
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let sys = random_system(4, 2, 3, 9);
        let s = solve_sensitivities(&sys).unwrap();
        assert_eq!(vjp(&DVector::zeros(6), &s).unwrap(), DVector::zeros(3));
        let mut e = DVector::zeros(6);
        e[4] = 1.0;
        assert_eq!(vjp(&e, &s).unwrap(), s.du.row(0).transpose());
    }

    #[test]
    fn non_converged_result_is_rejected() {
        let prob = default_problem("pendulum", 10, ParamTarget::Dynamics).unwrap();
        let opts = IlqrOptions {
            max_iter: 1,
            ..IlqrOptions::default()
        };
        let res = ilqr_solve(&prob, &DVector::from_vec(vec![1.0, 0.0]), &opts).unwrap();
        assert!(!res.converged);
        let err = implicit_backward(&prob, &res, &DiffOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NotConverged { .. }));
    }

    #[test]
    fn mode_parses_from_cli_names() {
        assert_eq!("last-layer".parse::<DiffMode>().unwrap(), DiffMode::LastLayer);
        assert!("both".parse::<DiffMode>().is_err());
    }
}
