//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use diff_ilqr::baselines::finite_diff_gradient;
use diff_ilqr::ilqr::{ilqr_solve, ilqr_solve_from, iteration_map, IlqrOptions, IlqrResult, Trajectory};
use diff_ilqr::implicit_diff::{implicit_backward, vjp, DiffMode, DiffOptions};
use diff_ilqr::lqr::LqrProblem;
use diff_ilqr::models::{default_problem, ParamTarget, Problem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `‖a − b‖_F / ‖b‖_F`, or the absolute error when `b` vanishes.
pub fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let den = b.norm();
    let num = (a - b).norm();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

pub fn rel_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let den = b.norm();
    let num = (a - b).norm();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// `‖a − b‖_F / max(‖b‖_F, 1)`: relative for blocks of unit size or more,
/// absolute below, so structurally zero blocks compare against roundoff.
pub fn rel_floor(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
}

/// Random LQR problem with positive definite cost blocks. Bounds are
/// `±bound` on every control, infinite when `bound` is `None`.
pub fn random_lqr(seed: u64, horizon: usize, n: usize, m: usize, bound: Option<f64>) -> LqrProblem {
    let mut r = rng(seed);
    let k = n + m;
    let mut mat = |rows: usize, cols: usize, s: f64| DMatrix::from_fn(rows, cols, |_, _| r.gen_range(-s..s));
    let dynamics: Vec<_> = (0..horizon).map(|_| mat(n, k, 0.8)).collect();
    let offsets: Vec<_> = (0..horizon).map(|_| mat(n, 1, 1.0).column(0).into_owned()).collect();
    let hessians: Vec<_> = (0..horizon)
        .map(|_| {
            let l = mat(k, k, 1.0);
            l.transpose() * l + DMatrix::identity(k, k) * 0.1
        })
        .collect();
    let gradients: Vec<_> = (0..horizon).map(|_| mat(k, 1, 3.0).column(0).into_owned()).collect();
    let x_init = mat(n, 1, 2.0).column(0).into_owned();
    let lim = bound.unwrap_or(f64::INFINITY);
    LqrProblem::new(
        dynamics,
        offsets,
        hessians,
        gradients,
        x_init,
        vec![DVector::from_element(m, -lim); horizon],
        vec![DVector::from_element(m, lim); horizon],
    )
    .unwrap()
}

/// Solves the unconstrained LQR problem as one dense equality-constrained
/// QP over `(τ_1, …, τ_T)`.
pub fn dense_kkt(prob: &LqrProblem) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let t_len = prob.horizon();
    let n = prob.state_dim();
    let m = prob.control_dim();
    let k = n + m;
    let nv = t_len * k;
    let nc = t_len * n;
    let mut kkt = DMatrix::zeros(nv + nc, nv + nc);
    let mut rhs = DVector::zeros(nv + nc);
    for t in 0..t_len {
        kkt.view_mut((t * k, t * k), (k, k)).copy_from(&prob.hessians[t]);
        rhs.rows_mut(t * k, k).copy_from(&(-&prob.gradients[t]));
    }
    let put = |kkt: &mut DMatrix<f64>, row: usize, col: usize, blk: &DMatrix<f64>| {
        kkt.view_mut((nv + row, col), blk.shape()).copy_from(blk);
        kkt.view_mut((col, nv + row), (blk.ncols(), blk.nrows())).copy_from(&blk.transpose());
    };
    // x_1 = x_init
    put(&mut kkt, 0, 0, &DMatrix::identity(n, n));
    rhs.rows_mut(nv, n).copy_from(&prob.x_init);
    // x_{t+1} − D_t τ_t = d_t
    for t in 0..t_len - 1 {
        let row = (t + 1) * n;
        put(&mut kkt, row, (t + 1) * k, &DMatrix::identity(n, n));
        put(&mut kkt, row, t * k, &(-&prob.dynamics[t]));
        rhs.rows_mut(nv + row, n).copy_from(&prob.offsets[t]);
    }
    let sol = kkt.lu().solve(&rhs).expect("KKT matrix is nonsingular");
    let states = (0..t_len).map(|t| sol.rows(t * k, n).into_owned()).collect();
    let controls = (0..t_len).map(|t| sol.rows(t * k + n, m).into_owned()).collect();
    (states, controls)
}

/// Reduced objective `J(U)` of an LQR problem.
pub fn reduced_objective(prob: &LqrProblem, controls: &[DVector<f64>]) -> f64 {
    prob.objective(&prob.rollout(controls), controls)
}

/// Gradient of the reduced objective. Central differences are exact for a
/// quadratic up to roundoff, so a unit step is used.
pub fn reduced_gradient(prob: &LqrProblem, controls: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(controls.len());
    for t in 0..controls.len() {
        let mut g = DVector::zeros(controls[t].len());
        for i in 0..controls[t].len() {
            let mut plus = controls.to_vec();
            let mut minus = controls.to_vec();
            plus[t][i] += 1.0;
            minus[t][i] -= 1.0;
            g[i] = (reduced_objective(prob, &plus) - reduced_objective(prob, &minus)) / 2.0;
        }
        out.push(g);
    }
    out
}

pub fn tight_opts() -> IlqrOptions {
    IlqrOptions {
        fp_tol: 1e-10,
        ..IlqrOptions::default()
    }
}

/// An imitation instance: a learner at a perturbed θ, an initial state and
/// the expert's controls at the true θ.
pub struct Instance {
    pub learner: Problem,
    pub x_init: DVector<f64>,
    pub target: DVector<f64>,
}

/// `θ = θ_true · U[0.8, 1.2]` per entry; `x_init` from the model's sampling box.
pub fn instance(model: &str, horizon: usize, seed: u64, target: ParamTarget) -> Instance {
    let truth = default_problem(model, horizon, target).unwrap();
    let mut r = rng(seed);
    let x_init = truth.dynamics().sample_initial_state(&mut r);
    let expert = ilqr_solve(&truth, &x_init, &tight_opts()).unwrap();
    assert!(expert.converged, "{model} expert did not converge");
    let theta = truth.theta().map(|v| v * r.gen_range(0.8..1.2));
    Instance {
        learner: truth.with_theta(&theta).unwrap(),
        x_init,
        target: expert.traj.stacked_controls(),
    }
}

/// `mean ‖U − U_target‖²`.
pub fn control_loss(traj: &Trajectory, target: &DVector<f64>) -> f64 {
    (traj.stacked_controls() - target).norm_squared() / target.len() as f64
}

pub fn control_cotangent(result: &IlqrResult, target: &DVector<f64>) -> DVector<f64> {
    let tn = result.traj.states.len() * result.traj.states[0].len();
    let mut cot = DVector::zeros(tn + target.len());
    cot.rows_mut(tn, target.len())
        .copy_from(&((result.traj.stacked_controls() - target) * (2.0 / target.len() as f64)));
    cot
}

pub fn implicit_loss_grad(inst: &Instance, mode: DiffMode) -> (IlqrResult, DVector<f64>) {
    let res = ilqr_solve(&inst.learner, &inst.x_init, &tight_opts()).unwrap();
    assert!(res.converged);
    let sens = implicit_backward(
        &inst.learner,
        &res,
        &DiffOptions {
            mode,
            ..DiffOptions::default()
        },
    )
    .unwrap();
    let g = vjp(&control_cotangent(&res, &inst.target), &sens).unwrap();
    (res, g)
}

/// Central differences of the loss of the re-converged solution, `h`
/// relative to each `θ_j`.
pub fn fd_loss_grad(inst: &Instance, warm: &IlqrResult, h: f64) -> DVector<f64> {
    let target = inst.target.clone();
    let loss = move |traj: &Trajectory| control_loss(traj, &target);
    finite_diff_gradient(&inst.learner, &inst.x_init, &loss, h, &tight_opts(), Some(&warm.traj.controls)).unwrap()
}

/// Jacobians of one full-step iteration at `traj`, by central differences
/// in `X`, `U` and `θ`: `(F_X, F_U, F_θ, G_X, G_U, G_θ)`.
pub fn fd_iteration_jacobians(problem: &Problem, x_init: &DVector<f64>, traj: &Trajectory, h: f64) -> [DMatrix<f64>; 6] {
    let horizon = traj.horizon();
    let n = problem.state_dim();
    let m = problem.control_dim();
    let p = problem.param_dim();
    let (tn, tm) = (horizon * n, horizon * m);
    let eval = |prob: &Problem, tr: &Trajectory| -> DVector<f64> {
        iteration_map(prob, x_init, tr, false).unwrap().traj.to_stacked()
    };
    let base = traj.to_stacked();
    let mut wrt_tau = DMatrix::zeros(tn + tm, tn + tm);
    for j in 0..tn + tm {
        let step = h * (1.0 + base[j].abs());
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[j] += step;
        minus[j] -= step;
        let col = (eval(problem, &Trajectory::from_stacked(&plus, horizon, n, m))
            - eval(problem, &Trajectory::from_stacked(&minus, horizon, n, m)))
            / (2.0 * step);
        wrt_tau.set_column(j, &col);
    }
    let theta = problem.theta();
    let mut wrt_theta = DMatrix::zeros(tn + tm, p);
    for j in 0..p {
        let step = h * (1.0 + theta[j].abs());
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[j] += step;
        minus[j] -= step;
        let col = (eval(&problem.with_theta(&plus).unwrap(), traj) - eval(&problem.with_theta(&minus).unwrap(), traj))
            / (2.0 * step);
        wrt_theta.set_column(j, &col);
    }
    [
        wrt_tau.view((0, 0), (tn, tn)).into_owned(),
        wrt_tau.view((0, tn), (tn, tm)).into_owned(),
        wrt_theta.rows(0, tn).into_owned(),
        wrt_tau.view((tn, 0), (tm, tn)).into_owned(),
        wrt_tau.view((tn, tn), (tm, tm)).into_owned(),
        wrt_theta.rows(tn, tm).into_owned(),
    ]
}

/// Stacked state of one trajectory step, `(x_t, u_t)`.
pub fn tau(traj: &Trajectory, t: usize) -> DVector<f64> {
    stack(&traj.states[t], &traj.controls[t])
}

/// Re-solves at θ shifted along coordinate `j`, warm-started.
pub fn resolve_shifted(problem: &Problem, x_init: &DVector<f64>, warm: &IlqrResult, j: usize, delta: f64) -> IlqrResult {
    let mut th = problem.theta();
    th[j] += delta;
    let opts = IlqrOptions {
        fp_tol: 1e-12,
        max_iter: 400,
        ..IlqrOptions::default()
    };
    let res = ilqr_solve_from(&problem.with_theta(&th).unwrap(), x_init, warm.traj.controls.clone(), &opts).unwrap();
    assert!(res.converged, "shifted re-solve did not converge");
    res
}
