//! Time-varying, box-constrained LQR.
//!
//! Solves
//!
//! ```text
//!   min  Σ_t ½ τ_tᵀ C_t τ_t + c_tᵀ τ_t,      τ_t = (z_t, v_t)
//!   s.t. z_{t+1} = D_t τ_t + d_t,  z_1 = x_init,  lower_t ≤ v_t ≤ upper_t
//! ```
//!
//! by a Riccati backward pass. The box is handled in two stages: a
//! projected-Newton backward pass (box QP per step at `z = 0`) gives an
//! initial active set, then a primal-dual active-set loop re-solves with the
//! clamped components frozen until the KKT conditions hold. With the final
//! active set frozen the solution map is smooth, and its derivatives with
//! respect to `(C, c, D, d, x_init)` are obtained from one auxiliary LQR solve
//! per cotangent.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Horizon from which unit-seed batches are evaluated in parallel under
/// [`BatchPolicy::Auto`].
pub const PARALLEL_MIN_HORIZON: usize = 30;

const MAX_ACTIVE_SET_ROUNDS: usize = 60;
const REG_START: f64 = 1e-6;
const REG_MAX: f64 = 1e6;
/// Multipliers with magnitude below this (relative) are treated as zero when
/// flagging degenerate bounds.
const DEGENERATE_TOL: f64 = 1e-9;

/// Coefficients of one LQR subproblem.
#[derive(Debug, Clone)]
pub struct LqrProblem {
    /// `D_t = [A_t B_t]`, n×(n+m).
    pub dynamics: Vec<DMatrix<f64>>,
    /// `d_t`, length n.
    pub offsets: Vec<DVector<f64>>,
    /// `C_t`, (n+m)×(n+m), symmetric.
    pub hessians: Vec<DMatrix<f64>>,
    /// `c_t`, length n+m.
    pub gradients: Vec<DVector<f64>>,
    pub x_init: DVector<f64>,
    pub lower: Vec<DVector<f64>>,
    pub upper: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundState {
    Free,
    Lower,
    Upper,
}

impl BoundState {
    pub fn is_clamped(self) -> bool {
        self != BoundState::Free
    }
}

/// Per-step, per-component bound status.
pub type ActiveSet = Vec<Vec<BoundState>>;

#[derive(Debug, Clone)]
pub struct LqrSolution {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    /// `K_t`; rows of clamped components are zero.
    pub feedback: Vec<DMatrix<f64>>,
    /// `k_t`; clamped components hold the bound value.
    pub feedforward: Vec<DVector<f64>>,
    pub active: ActiveSet,
    /// `λ_1 … λ_{T+1}` with `λ_{T+1} = 0`.
    pub costates: Vec<DVector<f64>>,
    /// Some component sits on a bound with a (numerically) zero multiplier.
    pub degenerate: bool,
    /// Largest diagonal shift applied to a control Hessian block.
    pub regularization: f64,
    pub active_set_rounds: usize,
}

/// Gradients of a scalar function of the LQR solution with respect to every
/// coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrGrad {
    pub dynamics: Vec<DMatrix<f64>>,
    pub offsets: Vec<DVector<f64>>,
    /// Symmetric.
    pub hessians: Vec<DMatrix<f64>>,
    pub gradients: Vec<DVector<f64>>,
    pub x_init: DVector<f64>,
    /// Copied from the solution: gradients are one-sided at a degenerate bound.
    pub degenerate: bool,
}

/// A perturbation direction for the LQR coefficients.
#[derive(Debug, Clone)]
pub struct LqrTangent {
    pub dynamics: Vec<DMatrix<f64>>,
    pub offsets: Vec<DVector<f64>>,
    pub hessians: Vec<DMatrix<f64>>,
    pub gradients: Vec<DVector<f64>>,
    pub x_init: DVector<f64>,
}

/// Cotangent on the LQR solution `(z_1..z_T, v_1..v_T)`.
#[derive(Debug, Clone)]
pub struct TrajCotangent {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl TrajCotangent {
    pub fn zeros(horizon: usize, n: usize, m: usize) -> Self {
        Self {
            states: vec![DVector::zeros(n); horizon],
            controls: vec![DVector::zeros(m); horizon],
        }
    }

    /// Unit cotangent on one component of the stacked layout
    /// `(z_1, …, z_T, v_1, …, v_T)`.
    pub fn unit(horizon: usize, n: usize, m: usize, index: usize) -> Self {
        let mut c = Self::zeros(horizon, n, m);
        if index < horizon * n {
            c.states[index / n][index % n] = 1.0;
        } else {
            let j = index - horizon * n;
            c.controls[j / m][j % m] = 1.0;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchPolicy {
    /// Parallel from [`PARALLEL_MIN_HORIZON`] steps on.
    #[default]
    Auto,
    Sequential,
    Parallel,
}

impl LqrProblem {
    /// Builds a problem, checking shapes and that `lower ≤ upper`.
    pub fn new(
        dynamics: Vec<DMatrix<f64>>,
        offsets: Vec<DVector<f64>>,
        hessians: Vec<DMatrix<f64>>,
        gradients: Vec<DVector<f64>>,
        x_init: DVector<f64>,
        lower: Vec<DVector<f64>>,
        upper: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let prob = Self {
            dynamics,
            offsets,
            hessians,
            gradients,
            x_init,
            lower,
            upper,
        };
        prob.validate()?;
        Ok(prob)
    }

    /// Problem without control bounds.
    pub fn unconstrained(
        dynamics: Vec<DMatrix<f64>>,
        offsets: Vec<DVector<f64>>,
        hessians: Vec<DMatrix<f64>>,
        gradients: Vec<DVector<f64>>,
        x_init: DVector<f64>,
    ) -> Result<Self> {
        let horizon = dynamics.len();
        let m = dynamics.first().map_or(0, |d| d.ncols() - d.nrows());
        Self::new(
            dynamics,
            offsets,
            hessians,
            gradients,
            x_init,
            vec![DVector::from_element(m, f64::NEG_INFINITY); horizon],
            vec![DVector::from_element(m, f64::INFINITY); horizon],
        )
    }

    pub fn horizon(&self) -> usize {
        self.dynamics.len()
    }

    pub fn state_dim(&self) -> usize {
        self.x_init.len()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics[0].ncols() - self.state_dim()
    }

    fn validate(&self) -> Result<()> {
        let horizon = self.dynamics.len();
        if horizon == 0 {
            return Err(Error::Config("LQR horizon must be positive".into()));
        }
        let n = self.x_init.len();
        let k = self.dynamics[0].ncols();
        if k <= n {
            return Err(Error::Config("LQR needs at least one control".into()));
        }
        let m = k - n;
        let lens = [
            ("offsets", self.offsets.len()),
            ("hessians", self.hessians.len()),
            ("gradients", self.gradients.len()),
            ("lower bounds", self.lower.len()),
            ("upper bounds", self.upper.len()),
        ];
        for (what, got) in lens {
            if got != horizon {
                return Err(Error::Dimension {
                    what,
                    expected: horizon,
                    got,
                });
            }
        }
        for t in 0..horizon {
            if self.dynamics[t].shape() != (n, k) {
                return Err(Error::Config(format!("D_{} must be {n}×{k}", t + 1)));
            }
            if self.hessians[t].shape() != (k, k) || self.gradients[t].len() != k {
                return Err(Error::Config(format!("cost terms at step {} have wrong shape", t + 1)));
            }
            if self.offsets[t].len() != n || self.lower[t].len() != m || self.upper[t].len() != m {
                return Err(Error::Config(format!("offset or bounds at step {} have wrong length", t + 1)));
            }
            if self.lower[t].iter().zip(self.upper[t].iter()).any(|(l, u)| l > u) {
                return Err(Error::Config(format!("lower bound exceeds upper bound at step {}", t + 1)));
            }
        }
        Ok(())
    }

    /// `Σ_t ½ τ_tᵀ C_t τ_t + c_tᵀ τ_t`.
    pub fn objective(&self, states: &[DVector<f64>], controls: &[DVector<f64>]) -> f64 {
        (0..self.horizon())
            .map(|t| {
                let tau = stack(&states[t], &controls[t]);
                0.5 * tau.dot(&(&self.hessians[t] * &tau)) + self.gradients[t].dot(&tau)
            })
            .sum()
    }

    /// States generated by `controls` through the affine dynamics.
    pub fn rollout(&self, controls: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut z = self.x_init.clone();
        let mut out = Vec::with_capacity(self.horizon());
        for t in 0..self.horizon() {
            out.push(z.clone());
            z = &self.dynamics[t] * stack(&z, &controls[t]) + &self.offsets[t];
        }
        out
    }

    /// Costates `λ_1..λ_{T+1}` along a trajectory.
    pub fn costates(&self, states: &[DVector<f64>], controls: &[DVector<f64>]) -> Vec<DVector<f64>> {
        costates(
            &self.dynamics,
            &self.hessians,
            &self.gradients,
            states,
            controls,
            self.state_dim(),
        )
    }
}

pub(crate) fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut tau = DVector::zeros(x.len() + u.len());
    tau.rows_mut(0, x.len()).copy_from(x);
    tau.rows_mut(x.len(), u.len()).copy_from(u);
    tau
}

fn costates(
    dynamics: &[DMatrix<f64>],
    hessians: &[DMatrix<f64>],
    linear: &[DVector<f64>],
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    n: usize,
) -> Vec<DVector<f64>> {
    let horizon = dynamics.len();
    let mut lam = vec![DVector::zeros(n); horizon + 1];
    for t in (0..horizon).rev() {
        let tau = stack(&states[t], &controls[t]);
        let g = &hessians[t] * tau + &linear[t];
        let a = dynamics[t].columns(0, n);
        lam[t] = g.rows(0, n) + a.transpose() * &lam[t + 1];
    }
    lam
}

/// Reduced gradient `∂J/∂v_t` with all other controls held fixed.
fn control_gradients(
    dynamics: &[DMatrix<f64>],
    hessians: &[DMatrix<f64>],
    linear: &[DVector<f64>],
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    lam: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let n = states[0].len();
    let m = controls[0].len();
    (0..dynamics.len())
        .map(|t| {
            let tau = stack(&states[t], &controls[t]);
            let g = &hessians[t] * tau + &linear[t];
            let b = dynamics[t].columns(n, m);
            g.rows(n, m) + b.transpose() * &lam[t + 1]
        })
        .collect()
}

fn select(mat: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| mat[(rows[i], cols[j])])
}

/// Cholesky of `h`, adding `λ·I` (λ from 1e-6, ×10 per retry, up to 1e6) if needed.
fn regularized_cholesky(h: &DMatrix<f64>, t: usize) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(ch) = Cholesky::new(h.clone()) {
        return Ok((ch, 0.0));
    }
    let mut lambda = REG_START;
    while lambda <= REG_MAX {
        let shifted = h + DMatrix::identity(h.nrows(), h.ncols()) * lambda;
        if let Some(ch) = Cholesky::new(shifted) {
            return Ok((ch, lambda));
        }
        lambda *= 10.0;
    }
    Err(Error::IndefiniteHessian { t, lambda: REG_MAX })
}

/// Minimizes `½ vᵀHv + gᵀv` over `lo ≤ v ≤ hi` for a small positive-definite `H`.
pub fn box_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> Result<(DVector<f64>, Vec<BoundState>)> {
    let m = g.len();
    let mut state = vec![BoundState::Free; m];
    for _ in 0..(4 * m + 10) {
        let v = box_qp_frozen(h, g, lo, hi, &state)?;
        let grad = h * &v + g;
        let mut next = state.clone();
        for i in 0..m {
            next[i] = match state[i] {
                BoundState::Free if v[i] > hi[i] => BoundState::Upper,
                BoundState::Free if v[i] < lo[i] => BoundState::Lower,
                BoundState::Upper if grad[i] > 0.0 => BoundState::Free,
                BoundState::Lower if grad[i] < 0.0 => BoundState::Free,
                s => s,
            };
        }
        if next == state {
            let v = DVector::from_iterator(m, (0..m).map(|i| v[i].clamp(lo[i], hi[i])));
            return Ok((v, state));
        }
        state = next;
    }
    // Cycling is rare for tiny problems; fall back to enumerating active sets.
    enumerate_box_qp(h, g, lo, hi)
}

fn box_qp_frozen(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    state: &[BoundState],
) -> Result<DVector<f64>> {
    let m = g.len();
    let mut v = DVector::zeros(m);
    let free: Vec<usize> = (0..m).filter(|&i| !state[i].is_clamped()).collect();
    for i in 0..m {
        match state[i] {
            BoundState::Lower => v[i] = lo[i],
            BoundState::Upper => v[i] = hi[i],
            BoundState::Free => {}
        }
    }
    if !free.is_empty() {
        let mut rhs = DVector::from_iterator(free.len(), free.iter().map(|&i| -g[i]));
        for (a, &i) in free.iter().enumerate() {
            for j in 0..m {
                if state[j].is_clamped() {
                    rhs[a] -= h[(i, j)] * v[j];
                }
            }
        }
        let hff = select(h, &free, &free);
        let sol = Cholesky::new(hff)
            .ok_or(Error::IndefiniteHessian { t: 0, lambda: 0.0 })?
            .solve(&rhs);
        for (a, &i) in free.iter().enumerate() {
            v[i] = sol[a];
        }
    }
    Ok(v)
}

fn enumerate_box_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> Result<(DVector<f64>, Vec<BoundState>)> {
    let m = g.len();
    if m > 8 {
        return Err(Error::ActiveSetCycle(4 * m + 10));
    }
    let mut best: Option<(f64, DVector<f64>, Vec<BoundState>)> = None;
    for code in 0..3usize.pow(m as u32) {
        let mut c = code;
        let state: Vec<BoundState> = (0..m)
            .map(|_| {
                let s = [BoundState::Free, BoundState::Lower, BoundState::Upper][c % 3];
                c /= 3;
                s
            })
            .collect();
        if state
            .iter()
            .enumerate()
            .any(|(i, s)| (*s == BoundState::Lower && !lo[i].is_finite()) || (*s == BoundState::Upper && !hi[i].is_finite()))
        {
            continue;
        }
        let v = box_qp_frozen(h, g, lo, hi, &state)?;
        if (0..m).any(|i| v[i] < lo[i] || v[i] > hi[i]) {
            continue;
        }
        let obj = 0.5 * v.dot(&(h * &v)) + g.dot(&v);
        if best.as_ref().is_none_or(|(b, _, _)| obj < *b) {
            best = Some((obj, v, state));
        }
    }
    best.map(|(_, v, s)| (v, s))
        .ok_or(Error::ActiveSetCycle(4 * m + 10))
}

/// Quadratic part of the Riccati recursion for a frozen active set.
#[derive(Debug, Clone)]
struct StepFactor {
    /// `Q_t = C_t + D_tᵀ V_{t+1} D_t`.
    q: DMatrix<f64>,
    /// `V_{t+1}`.
    v_next: DMatrix<f64>,
    free: Vec<usize>,
    chol_ff: Option<Cholesky<f64, Dyn>>,
    gain: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct RiccatiFactor {
    steps: Vec<StepFactor>,
    regularization: f64,
}

fn factor(dynamics: &[DMatrix<f64>], hessians: &[DMatrix<f64>], active: &ActiveSet, n: usize) -> Result<RiccatiFactor> {
    let horizon = dynamics.len();
    let m = dynamics[0].ncols() - n;
    let mut v_mat = DMatrix::zeros(n, n);
    let mut steps = Vec::with_capacity(horizon);
    let mut regularization: f64 = 0.0;
    for t in (0..horizon).rev() {
        let d = &dynamics[t];
        let mut q = &hessians[t] + d.transpose() * &v_mat * d;
        q = (&q + q.transpose()) * 0.5;
        let free: Vec<usize> = (0..m).filter(|&i| !active[t][i].is_clamped()).collect();
        let mut gain = DMatrix::zeros(m, n);
        let chol_ff = if free.is_empty() {
            None
        } else {
            let rows: Vec<usize> = free.iter().map(|i| n + i).collect();
            let xs: Vec<usize> = (0..n).collect();
            let (ch, lam) = regularized_cholesky(&select(&q, &rows, &rows), t + 1)?;
            regularization = regularization.max(lam);
            let k_free = -ch.solve(&select(&q, &rows, &xs));
            for (a, &i) in free.iter().enumerate() {
                gain.row_mut(i).copy_from(&k_free.row(a));
            }
            Some(ch)
        };
        let q_xx = q.view((0, 0), (n, n));
        let q_xu = q.view((0, n), (n, m));
        let q_uu = q.view((n, n), (m, m));
        let next_v = q_xx + q_xu * &gain + gain.transpose() * q_xu.transpose() + gain.transpose() * q_uu * &gain;
        steps.push(StepFactor {
            q,
            v_next: v_mat,
            free,
            chol_ff,
            gain,
        });
        v_mat = (&next_v + next_v.transpose()) * 0.5;
    }
    steps.reverse();
    Ok(RiccatiFactor {
        steps,
        regularization,
    })
}

struct Sweep {
    states: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
    feedforward: Vec<DVector<f64>>,
}

/// Linear part of the recursion plus the forward rollout, for fixed
/// quadratic data. `clamp_values[t][i]` is used for clamped components.
fn sweep(
    fac: &RiccatiFactor,
    dynamics: &[DMatrix<f64>],
    linear: &[DVector<f64>],
    offsets: Option<&[DVector<f64>]>,
    x_init: &DVector<f64>,
    clamp_values: Option<&[DVector<f64>]>,
) -> Sweep {
    let horizon = dynamics.len();
    let n = x_init.len();
    let m = dynamics[0].ncols() - n;
    let mut v_vec = DVector::zeros(n);
    let mut feedforward = vec![DVector::zeros(m); horizon];
    for t in (0..horizon).rev() {
        let st = &fac.steps[t];
        let d = &dynamics[t];
        let mut carry = v_vec.clone();
        if let Some(off) = offsets {
            carry += &st.v_next * &off[t];
        }
        let q = &linear[t] + d.transpose() * carry;
        let mut k = DVector::zeros(m);
        if let Some(vals) = clamp_values {
            for i in 0..m {
                if !st.free.contains(&i) {
                    k[i] = vals[t][i];
                }
            }
        }
        if let Some(ch) = &st.chol_ff {
            let mut rhs = DVector::from_iterator(st.free.len(), st.free.iter().map(|&i| -q[n + i]));
            if clamp_values.is_some() {
                for (a, &i) in st.free.iter().enumerate() {
                    for j in 0..m {
                        if !st.free.contains(&j) {
                            rhs[a] -= st.q[(n + i, n + j)] * k[j];
                        }
                    }
                }
            }
            let sol = ch.solve(&rhs);
            for (a, &i) in st.free.iter().enumerate() {
                k[i] = sol[a];
            }
        }
        let q_x = q.rows(0, n);
        let q_u = q.rows(n, m);
        let q_xu = st.q.view((0, n), (n, m));
        let q_uu = st.q.view((n, n), (m, m));
        v_vec = q_x + q_xu * &k + st.gain.transpose() * q_u + st.gain.transpose() * (q_uu * &k);
        feedforward[t] = k;
    }

    let mut states = Vec::with_capacity(horizon);
    let mut controls = Vec::with_capacity(horizon);
    let mut z = x_init.clone();
    for t in 0..horizon {
        let v = &fac.steps[t].gain * &z + &feedforward[t];
        let mut next = &dynamics[t] * stack(&z, &v);
        if let Some(off) = offsets {
            next += &off[t];
        }
        states.push(z);
        controls.push(v);
        z = next;
    }
    Sweep {
        states,
        controls,
        feedforward,
    }
}

/// Projected-Newton backward pass: a box QP per step at `z = 0`, gains on
/// the resulting free set, then a clamped forward rollout.
///
/// This is the classical two-pass scheme; its active set is exact whenever
/// the optimal `z` is zero, and otherwise serves as the starting point for
/// [`solve`].
pub fn lqr_backward_projected(prob: &LqrProblem) -> Result<(Vec<DMatrix<f64>>, Vec<DVector<f64>>)> {
    let horizon = prob.horizon();
    let n = prob.state_dim();
    let m = prob.control_dim();
    let mut v_mat = DMatrix::zeros(n, n);
    let mut v_vec = DVector::zeros(n);
    let mut feedback = vec![DMatrix::zeros(m, n); horizon];
    let mut feedforward = vec![DVector::zeros(m); horizon];
    for t in (0..horizon).rev() {
        let d = &prob.dynamics[t];
        let mut q = &prob.hessians[t] + d.transpose() * &v_mat * d;
        q = (&q + q.transpose()) * 0.5;
        let qv = &prob.gradients[t] + d.transpose() * (&v_mat * &prob.offsets[t] + &v_vec);
        let q_uu = q.view((n, n), (m, m)).into_owned();
        let (ch, lam) = regularized_cholesky(&q_uu, t + 1)?;
        let q_uu_reg = if lam > 0.0 {
            &q_uu + DMatrix::identity(m, m) * lam
        } else {
            q_uu.clone()
        };
        drop(ch);
        let (k, state) = box_qp(&q_uu_reg, &qv.rows(n, m).into_owned(), &prob.lower[t], &prob.upper[t])?;
        let free: Vec<usize> = (0..m).filter(|&i| !state[i].is_clamped()).collect();
        let mut gain = DMatrix::zeros(m, n);
        if !free.is_empty() {
            let rows: Vec<usize> = free.iter().map(|i| n + i).collect();
            let xs: Vec<usize> = (0..n).collect();
            let hff = select(&q_uu_reg, &free, &free);
            let ch = Cholesky::new(hff).ok_or(Error::IndefiniteHessian { t: t + 1, lambda: lam })?;
            let k_free = -ch.solve(&select(&q, &rows, &xs));
            for (a, &i) in free.iter().enumerate() {
                gain.row_mut(i).copy_from(&k_free.row(a));
            }
        }
        let q_xx = q.view((0, 0), (n, n));
        let q_xu = q.view((0, n), (n, m));
        let q_uu_v = q.view((n, n), (m, m));
        let next_v = q_xx + q_xu * &gain + gain.transpose() * q_xu.transpose() + gain.transpose() * q_uu_v * &gain;
        v_vec = qv.rows(0, n) + q_xu * &k + gain.transpose() * qv.rows(n, m) + gain.transpose() * (q_uu_v * &k);
        v_mat = (&next_v + next_v.transpose()) * 0.5;
        feedback[t] = gain;
        feedforward[t] = k;
    }
    Ok((feedback, feedforward))
}

/// Forward pass with given gains: `v_t = clamp(K_t z_t + k_t)`.
pub fn lqr_forward(
    prob: &LqrProblem,
    feedback: &[DMatrix<f64>],
    feedforward: &[DVector<f64>],
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, ActiveSet) {
    let horizon = prob.horizon();
    let m = prob.control_dim();
    let mut z = prob.x_init.clone();
    let mut states = Vec::with_capacity(horizon);
    let mut controls = Vec::with_capacity(horizon);
    let mut active = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let raw = &feedback[t] * &z + &feedforward[t];
        let mut v = raw.clone();
        let mut st = vec![BoundState::Free; m];
        for i in 0..m {
            if raw[i] >= prob.upper[t][i] {
                v[i] = prob.upper[t][i];
                st[i] = BoundState::Upper;
            } else if raw[i] <= prob.lower[t][i] {
                v[i] = prob.lower[t][i];
                st[i] = BoundState::Lower;
            }
        }
        let next = &prob.dynamics[t] * stack(&z, &v) + &prob.offsets[t];
        states.push(z);
        controls.push(v);
        active.push(st);
        z = next;
    }
    (states, controls, active)
}

fn clamp_values(prob: &LqrProblem, active: &ActiveSet) -> Vec<DVector<f64>> {
    active
        .iter()
        .enumerate()
        .map(|(t, st)| {
            DVector::from_iterator(
                st.len(),
                st.iter().enumerate().map(|(i, s)| match s {
                    BoundState::Lower => prob.lower[t][i],
                    BoundState::Upper => prob.upper[t][i],
                    BoundState::Free => 0.0,
                }),
            )
        })
        .collect()
}

/// Solves the LQR with the given components clamped at their bounds and all
/// others unconstrained.
pub fn solve_frozen(prob: &LqrProblem, active: &ActiveSet) -> Result<LqrSolution> {
    let n = prob.state_dim();
    let fac = factor(&prob.dynamics, &prob.hessians, active, n)?;
    let vals = clamp_values(prob, active);
    let sw = sweep(
        &fac,
        &prob.dynamics,
        &prob.gradients,
        Some(&prob.offsets),
        &prob.x_init,
        Some(&vals),
    );
    let costates = prob.costates(&sw.states, &sw.controls);
    Ok(LqrSolution {
        states: sw.states,
        controls: sw.controls,
        feedback: fac.steps.iter().map(|s| s.gain.clone()).collect(),
        feedforward: sw.feedforward,
        active: active.clone(),
        costates,
        degenerate: false,
        regularization: fac.regularization,
        active_set_rounds: 0,
    })
}

fn scale_of(prob: &LqrProblem) -> f64 {
    let g = prob.gradients.iter().map(|c| c.amax()).fold(0.0, f64::max);
    let h = prob.hessians.iter().map(|c| c.amax()).fold(0.0, f64::max);
    1.0 + g + h
}

/// Solves the box-constrained LQR exactly (up to the KKT tolerance).
pub fn solve(prob: &LqrProblem) -> Result<LqrSolution> {
    let (feedback, feedforward) = lqr_backward_projected(prob)?;
    let (_, _, initial) = lqr_forward(prob, &feedback, &feedforward);
    solve_from(prob, initial)
}

/// Active-set refinement starting from `active`.
pub fn solve_from(prob: &LqrProblem, mut active: ActiveSet) -> Result<LqrSolution> {
    let horizon = prob.horizon();
    let m = prob.control_dim();
    let scale = scale_of(prob);
    let switch_tol = 1e-13 * scale;
    for round in 1..=MAX_ACTIVE_SET_ROUNDS {
        let mut sol = solve_frozen(prob, &active)?;
        let grads = control_gradients(
            &prob.dynamics,
            &prob.hessians,
            &prob.gradients,
            &sol.states,
            &sol.controls,
            &sol.costates,
        );
        let mut next = active.clone();
        for t in 0..horizon {
            for i in 0..m {
                let v = sol.controls[t][i];
                let (lo, hi) = (prob.lower[t][i], prob.upper[t][i]);
                let feas_tol = 1e-12 * (1.0 + lo.abs().min(hi.abs()).min(1e12));
                next[t][i] = match active[t][i] {
                    BoundState::Free if v > hi + feas_tol => BoundState::Upper,
                    BoundState::Free if v < lo - feas_tol => BoundState::Lower,
                    BoundState::Upper if grads[t][i] > switch_tol => BoundState::Free,
                    BoundState::Lower if grads[t][i] < -switch_tol => BoundState::Free,
                    s => s,
                };
            }
        }
        if next == active {
            // Bounds held with a vanishing multiplier are released and flagged.
            let deg_tol = DEGENERATE_TOL * scale;
            let mut degenerate = false;
            let mut released = false;
            for t in 0..horizon {
                for i in 0..m {
                    let (lo, hi) = (prob.lower[t][i], prob.upper[t][i]);
                    match active[t][i] {
                        BoundState::Free => {
                            let v = sol.controls[t][i];
                            let near = deg_tol * (1.0 + v.abs());
                            if (v - hi).abs() <= near || (v - lo).abs() <= near {
                                degenerate = true;
                            }
                        }
                        _ if grads[t][i].abs() <= deg_tol => {
                            active[t][i] = BoundState::Free;
                            degenerate = true;
                            released = true;
                        }
                        _ => {}
                    }
                }
            }
            if released {
                sol = solve_frozen(prob, &active)?;
            }
            sol.degenerate = degenerate;
            sol.active_set_rounds = round;
            return Ok(sol);
        }
        active = next;
    }
    Err(Error::ActiveSetCycle(MAX_ACTIVE_SET_ROUNDS))
}

/// Derivatives of the LQR solution map with the solution's active set frozen.
///
/// The Riccati factorization is computed once; every cotangent or tangent
/// then costs one linear sweep, O(T).
#[derive(Debug, Clone)]
pub struct LqrDifferentiator<'a> {
    prob: &'a LqrProblem,
    sol: &'a LqrSolution,
    fac: RiccatiFactor,
}

impl<'a> LqrDifferentiator<'a> {
    pub fn new(prob: &'a LqrProblem, sol: &'a LqrSolution) -> Result<Self> {
        let fac = factor(&prob.dynamics, &prob.hessians, &sol.active, prob.state_dim())?;
        Ok(Self { prob, sol, fac })
    }

    /// Gradient of `L = ⟨w, (z, v)⟩` with respect to `(D, d, C, c, x_init)`.
    /// Cotangent entries on clamped controls are ignored: those controls do
    /// not move under small perturbations.
    pub fn grad(&self, cot: &TrajCotangent) -> LqrGrad {
        let horizon = self.prob.horizon();
        let n = self.prob.state_dim();
        let m = self.prob.control_dim();
        let linear: Vec<DVector<f64>> = (0..horizon)
            .map(|t| {
                let mut w = stack(&cot.states[t], &cot.controls[t]);
                for i in 0..m {
                    if self.sol.active[t][i].is_clamped() {
                        w[n + i] = 0.0;
                    }
                }
                w
            })
            .collect();
        let zero = DVector::zeros(n);
        let adj = sweep(&self.fac, &self.prob.dynamics, &linear, None, &zero, None);
        let dlam = costates(
            &self.prob.dynamics,
            &self.prob.hessians,
            &linear,
            &adj.states,
            &adj.controls,
            n,
        );

        let mut out = LqrGrad {
            dynamics: Vec::with_capacity(horizon),
            offsets: Vec::with_capacity(horizon),
            hessians: Vec::with_capacity(horizon),
            gradients: Vec::with_capacity(horizon),
            x_init: dlam[0].clone(),
            degenerate: self.sol.degenerate,
        };
        for t in 0..horizon {
            let tau = stack(&self.sol.states[t], &self.sol.controls[t]);
            let dtau = stack(&adj.states[t], &adj.controls[t]);
            let outer = &dtau * tau.transpose();
            out.hessians.push((&outer + outer.transpose()) * 0.5);
            out.dynamics
                .push(&dlam[t + 1] * tau.transpose() + &self.sol.costates[t + 1] * dtau.transpose());
            out.offsets.push(dlam[t + 1].clone());
            out.gradients.push(dtau);
        }
        out
    }

    /// Directional derivative of the solution `(z, v)` along `tan`.
    pub fn jvp(&self, tan: &LqrTangent) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let horizon = self.prob.horizon();
        let mut linear = Vec::with_capacity(horizon);
        let mut offsets = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let tau = stack(&self.sol.states[t], &self.sol.controls[t]);
            linear.push(
                &tan.hessians[t] * &tau + &tan.gradients[t] + tan.dynamics[t].transpose() * &self.sol.costates[t + 1],
            );
            offsets.push(&tan.dynamics[t] * &tau + &tan.offsets[t]);
        }
        let sw = sweep(
            &self.fac,
            &self.prob.dynamics,
            &linear,
            Some(&offsets),
            &tan.x_init,
            None,
        );
        (sw.states, sw.controls)
    }

    /// One gradient per selected output component (unit seeds). Indices
    /// refer to the stacked layout `(z_1..z_T, v_1..v_T)`.
    pub fn jacobian_batched(&self, out_indices: &[usize], policy: BatchPolicy) -> Vec<LqrGrad> {
        let horizon = self.prob.horizon();
        let n = self.prob.state_dim();
        let m = self.prob.control_dim();
        let seed = |&i: &usize| self.grad(&TrajCotangent::unit(horizon, n, m, i));
        let parallel = match policy {
            BatchPolicy::Auto => horizon >= PARALLEL_MIN_HORIZON,
            BatchPolicy::Sequential => false,
            BatchPolicy::Parallel => true,
        };
        if parallel {
            out_indices.par_iter().map(seed).collect()
        } else {
            out_indices.iter().map(seed).collect()
        }
    }
}

/// Gradient of a scalar loss of the solution with respect to every LQR
/// coefficient.
pub fn lqr_grad_scalar(prob: &LqrProblem, sol: &LqrSolution, cot: &TrajCotangent) -> Result<LqrGrad> {
    Ok(LqrDifferentiator::new(prob, sol)?.grad(cot))
}

/// Jacobian rows of the solution map for the selected output components.
pub fn lqr_jacobian_batched(prob: &LqrProblem, sol: &LqrSolution, out_indices: &[usize]) -> Result<Vec<LqrGrad>> {
    Ok(LqrDifferentiator::new(prob, sol)?.jacobian_batched(out_indices, BatchPolicy::Auto))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_problem(c_u: f64, upper: f64) -> LqrProblem {
        // n = 1, m = 1, T = 1: minimize ½z² + ½v² + c_u·v with z_1 = 0.
        LqrProblem::new(
            vec![DMatrix::from_row_slice(1, 2, &[1.0, 1.0])],
            vec![DVector::zeros(1)],
            vec![DMatrix::identity(2, 2)],
            vec![DVector::from_vec(vec![0.0, c_u])],
            DVector::zeros(1),
            vec![DVector::from_element(1, -10.0)],
            vec![DVector::from_element(1, upper)],
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_gives_zero_step() {
        let sol = solve(&scalar_problem(0.0, 10.0)).unwrap();
        assert_eq!(sol.controls[0][0], 0.0);
        assert_eq!(sol.feedforward[0][0], 0.0);
        // Newton condition for the single step: K = -C_uu⁻¹ C_ux = 0.
        assert_eq!(sol.feedback[0][(0, 0)], 0.0);
    }

    #[test]
    fn active_upper_bound_is_clamped_exactly() {
        // Unconstrained optimum v = 2 but upper bound is 0.
        let sol = solve(&scalar_problem(-2.0, 0.0)).unwrap();
        assert_eq!(sol.controls[0][0], 0.0);
        assert_eq!(sol.active[0][0], BoundState::Upper);
        assert_eq!(sol.feedback[0].row(0).amax(), 0.0);
        assert!(!sol.degenerate);
    }

    #[test]
    fn bound_with_zero_multiplier_is_flagged() {
        // Unconstrained optimum exactly at the bound.
        let sol = solve(&scalar_problem(-1.0, 1.0)).unwrap();
        assert!((sol.controls[0][0] - 1.0).abs() < 1e-14);
        assert_eq!(sol.active[0][0], BoundState::Free);
        assert!(sol.degenerate);
    }

    #[test]
    fn zero_data_gives_zero_trajectory() {
        let prob = LqrProblem::unconstrained(
            vec![DMatrix::from_row_slice(2, 3, &[1.0, 0.1, 0.0, 0.0, 1.0, 0.1]); 4],
            vec![DVector::zeros(2); 4],
            vec![DMatrix::identity(3, 3); 4],
            vec![DVector::zeros(3); 4],
            DVector::zeros(2),
        )
        .unwrap();
        let sol = solve(&prob).unwrap();
        assert!(sol.states.iter().chain(&sol.controls).all(|v| v.amax() == 0.0));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let prob = scalar_problem(-0.5, 10.0);
        let sol = solve(&prob).unwrap();
        let g = lqr_grad_scalar(&prob, &sol, &TrajCotangent::zeros(1, 1, 1)).unwrap();
        assert!(g.dynamics.iter().chain(&g.hessians).all(|m| m.amax() == 0.0));
        assert!(g.offsets.iter().chain(&g.gradients).all(|v| v.amax() == 0.0));
        assert_eq!(g.x_init.amax(), 0.0);
    }

    #[test]
    fn box_qp_matches_enumeration() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.9, 0.9, 1.0]);
        let g = DVector::from_vec(vec![-3.0, 1.5]);
        let lo = DVector::from_vec(vec![-0.5, -0.5]);
        let hi = DVector::from_vec(vec![0.5, 0.5]);
        let (v, _) = box_qp(&h, &g, &lo, &hi).unwrap();
        let (w, _) = enumerate_box_qp(&h, &g, &lo, &hi).unwrap();
        assert!((v - w).amax() < 1e-12);
    }

    #[test]
    fn rejects_inverted_bounds() {
        let err = LqrProblem::new(
            vec![DMatrix::from_row_slice(1, 2, &[1.0, 1.0])],
            vec![DVector::zeros(1)],
            vec![DMatrix::identity(2, 2)],
            vec![DVector::zeros(2)],
            DVector::zeros(1),
            vec![DVector::from_element(1, 1.0)],
            vec![DVector::from_element(1, -1.0)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
