use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::ExpertRecord;
use super::metrics::model_loss;
use crate::error::{Error, Result};
use crate::ilqr::{ilqr_solve, IlqrOptions};
use crate::implicit_diff::{implicit_backward, vjp, DiffMode, DiffOptions};
use crate::models::{GoalCost, ParamTarget, Problem};

/// Records allowed to fail per evaluation, as a fraction.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;
/// Imitation loss above which training stops as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnMode {
    /// Learn dynamics parameters; the cost is known.
    Dx,
    /// Learn cost weights and goal; the dynamics are known.
    Cost,
    /// Fit dynamics parameters to state transitions.
    Sysid,
}

impl LearnMode {
    pub fn target(self) -> ParamTarget {
        match self {
            LearnMode::Dx | LearnMode::Sysid => ParamTarget::Dynamics,
            LearnMode::Cost => ParamTarget::Cost,
        }
    }
}

impl std::str::FromStr for LearnMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dx" => Ok(LearnMode::Dx),
            "cost" => Ok(LearnMode::Cost),
            "sysid" => Ok(LearnMode::Sysid),
            other => Err(Error::Config(format!("unknown learning mode {other:?} (expected dx, cost or sysid)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: LearnMode,
    pub learning_rate: f64,
    /// RMSprop squared-gradient averaging coefficient.
    pub decay: f64,
    /// When set, `decay` is instead used as a learning-rate time decay,
    /// `lr_e = lr / (1 + decay·e)`, with averaging coefficient 0.9.
    pub lr_time_decay: bool,
    pub epsilon: f64,
    pub epochs: usize,
    /// Cost mode: epochs per block of weight-only or goal-only updates.
    pub alternation_period: usize,
    pub train_size: usize,
    /// `θ̂₀ = init_scale·θ_true` ...
    pub init_scale: f64,
    /// ... times an independent factor `1 + U(−jitter, jitter)` per entry ...
    pub init_jitter: f64,
    /// ... plus this offset on cost-goal entries.
    pub goal_offset: f64,
    pub seed: u64,
    pub diff_mode: DiffMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LearnMode::Dx,
            learning_rate: 1e-2,
            decay: 0.5,
            lr_time_decay: false,
            epsilon: 1e-8,
            epochs: 500,
            alternation_period: 10,
            train_size: 50,
            init_scale: 1.5,
            init_jitter: 0.0,
            goal_offset: 0.0,
            seed: 0,
            diff_mode: DiffMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.learning_rate >= 0.0 && self.learning_rate.is_finite(), "learning_rate must be ≥ 0"),
            ((0.0..1.0).contains(&self.decay), "decay must lie in [0, 1)"),
            (self.epsilon > 0.0, "epsilon must be positive"),
            (self.alternation_period > 0, "alternation_period must be positive"),
            (self.train_size > 0, "train_size must be positive"),
            ((0.0..1.0).contains(&self.init_jitter), "init_jitter must lie in [0, 1)"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

/// Imitation loss over a set of records, optionally with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Option<DVector<f64>>,
    pub skipped: usize,
    pub total: usize,
}

/// `mean_r ‖U(θ̂; x_init_r) − U_r‖² / (T·m)` with the learner's controls
/// solved from a cold start. Records whose solve fails are skipped; more
/// than 10% skipped is an error.
pub fn imitation_loss(
    learner: &Problem,
    records: &[ExpertRecord],
    opts: &IlqrOptions,
    with_grad: bool,
    diff: &DiffOptions,
) -> Result<LossEval> {
    if records.is_empty() {
        return Err(Error::Config("no records to evaluate".into()));
    }
    let dim = learner.horizon() * learner.control_dim();
    let per_record = |r: &ExpertRecord| -> Result<Option<(f64, Option<DVector<f64>>)>> {
        let target = r.stacked_controls();
        if target.len() != dim || r.x_init.len() != learner.state_dim() {
            return Err(Error::Dimension {
                what: "expert record",
                expected: dim,
                got: target.len(),
            });
        }
        let res = match ilqr_solve(learner, &r.x_init_vector(), opts) {
            Ok(res) if res.converged => res,
            Ok(_) => return Ok(None),
            Err(e) if e.is_solver_failure() => return Ok(None),
            Err(e) => return Err(e),
        };
        let diffu = res.traj.stacked_controls() - target;
        let loss = diffu.norm_squared() / dim as f64;
        if !with_grad {
            return Ok(Some((loss, None)));
        }
        let sens = match implicit_backward(learner, &res, diff) {
            Ok(s) => s,
            Err(e) if e.is_solver_failure() => return Ok(None),
            Err(e) => return Err(e),
        };
        let tn = sens.dx.nrows();
        let mut cot = DVector::zeros(tn + dim);
        cot.rows_mut(tn, dim).copy_from(&(diffu * (2.0 / dim as f64)));
        Ok(Some((loss, Some(vjp(&cot, &sens)?))))
    };
    let outcomes: Vec<_> = records.par_iter().map(per_record).collect::<Result<Vec<_>>>()?;

    // Reduce in record order so results do not depend on scheduling.
    let total = records.len();
    let mut skipped = 0;
    let mut loss = 0.0;
    let mut grad = with_grad.then(|| DVector::zeros(learner.param_dim()));
    for o in outcomes {
        match o {
            None => skipped += 1,
            Some((l, g)) => {
                loss += l;
                if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
                    *acc += g;
                }
            }
        }
    }
    if skipped as f64 > MAX_SKIPPED_FRACTION * total as f64 || skipped == total {
        return Err(Error::TooManySkipped { skipped, total });
    }
    let used = (total - skipped) as f64;
    Ok(LossEval {
        loss: loss / used,
        grad: grad.map(|g| g / used),
        skipped,
        total,
    })
}

/// Initial guess `θ̂₀` for the learner.
pub fn initial_theta(config: &TrainConfig, learner: &Problem, theta_true: &DVector<f64>) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut th = theta_true.map(|v| {
        let jitter = if config.init_jitter > 0.0 {
            rng.gen_range(-config.init_jitter..config.init_jitter)
        } else {
            0.0
        };
        v * config.init_scale * (1.0 + jitter)
    });
    if config.mode == LearnMode::Cost && config.goal_offset != 0.0 {
        for i in goal_block(learner) {
            th[i] += config.goal_offset;
        }
    }
    th
}

fn goal_block(learner: &Problem) -> std::ops::Range<usize> {
    GoalCost::new(learner.state_dim(), learner.control_dim()).goal_indices()
}

fn weight_block(learner: &Problem) -> std::ops::Range<usize> {
    GoalCost::new(learner.state_dim(), learner.control_dim()).weight_indices()
}

/// Which entries of θ the update of epoch `epoch` (1-based) may change.
pub fn update_mask(config: &TrainConfig, learner: &Problem, epoch: usize) -> Vec<bool> {
    let p = learner.param_dim();
    if config.mode != LearnMode::Cost || learner.cost().id() != "goal" {
        return vec![true; p];
    }
    let block = (epoch - 1) / config.alternation_period;
    let range = if block % 2 == 0 {
        weight_block(learner)
    } else {
        goal_block(learner)
    };
    (0..p).map(|i| range.contains(&i)).collect()
}

/// Internal RMSprop with per-coordinate masking.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    /// Learning-rate time decay, 0 to disable.
    pub time_decay: f64,
    square_avg: DVector<f64>,
    steps: usize,
}

impl RmsProp {
    pub fn new(config: &TrainConfig, dim: usize) -> Self {
        let (rho, time_decay) = if config.lr_time_decay {
            (0.9, config.decay)
        } else {
            (config.decay, 0.0)
        };
        Self {
            learning_rate: config.learning_rate,
            rho,
            epsilon: config.epsilon,
            time_decay,
            square_avg: DVector::zeros(dim),
            steps: 0,
        }
    }

    pub fn step(&mut self, theta: &mut DVector<f64>, grad: &DVector<f64>, mask: &[bool]) {
        let lr = self.learning_rate / (1.0 + self.time_decay * self.steps as f64);
        for i in 0..theta.len() {
            if !mask[i] {
                continue;
            }
            self.square_avg[i] = self.rho * self.square_avg[i] + (1.0 - self.rho) * grad[i] * grad[i];
            theta[i] -= lr * grad[i] / (self.square_avg[i].sqrt() + self.epsilon);
        }
        self.steps += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the initial guess; epoch `e` is evaluated after `e` updates.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    /// Against θ_true, when it applies to the learned parameters.
    pub model_loss: f64,
    pub theta: Vec<f64>,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StopReason {
    Completed,
    Diverged { epoch: usize, loss: f64 },
    TooManySkipped { epoch: usize, skipped: usize, total: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_theta: Vec<f64>,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch]
    }
}

/// Gradient-based imitation learning: full-batch RMSprop on the training
/// records, one update per epoch, best-validation checkpointing.
///
/// `learner` supplies the structure (model, cost, horizon, bounds, known
/// parameters); its θ is replaced by the initial guess.
pub fn train(
    config: &TrainConfig,
    learner: &Problem,
    theta_true: &DVector<f64>,
    train_set: &[ExpertRecord],
    validation_set: &[ExpertRecord],
    opts: &IlqrOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.mode == LearnMode::Sysid {
        return Err(Error::Config("use sysid_fit for the sysid mode".into()));
    }
    let learner = learner.with_target(config.mode.target());
    if theta_true.len() != learner.param_dim() {
        return Err(Error::Dimension {
            what: "θ_true",
            expected: learner.param_dim(),
            got: theta_true.len(),
        });
    }
    let diff = DiffOptions {
        mode: config.diff_mode,
        ..DiffOptions::default()
    };
    let mut theta = initial_theta(config, &learner, theta_true);
    let mut opt = RmsProp::new(config, theta.len());
    let mut history = Vec::with_capacity(config.epochs + 1);
    let mut best_epoch = 0;
    let mut stop = StopReason::Completed;

    for epoch in 0..=config.epochs {
        let current = learner.with_theta(&theta)?;
        let train_eval = match imitation_loss(&current, train_set, opts, epoch < config.epochs, &diff) {
            Ok(e) => e,
            Err(Error::TooManySkipped { skipped, total }) => {
                stop = StopReason::TooManySkipped { epoch, skipped, total };
                break;
            }
            Err(e) => return Err(e),
        };
        let validation_loss = if validation_set.is_empty() {
            train_eval.loss
        } else {
            match imitation_loss(&current, validation_set, opts, false, &diff) {
                Ok(e) => e.loss,
                Err(Error::TooManySkipped { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            }
        };
        history.push(EpochRecord {
            epoch,
            train_loss: train_eval.loss,
            validation_loss,
            model_loss: model_loss(&theta, theta_true),
            theta: theta.iter().copied().collect(),
            skipped: train_eval.skipped,
        });
        if validation_loss < history[best_epoch].validation_loss {
            best_epoch = history.len() - 1;
        }
        if !(train_eval.loss <= DIVERGENCE_LOSS) {
            stop = StopReason::Diverged {
                epoch,
                loss: train_eval.loss,
            };
            break;
        }
        if let Some(grad) = train_eval.grad {
            let mask = update_mask(config, &learner, epoch + 1);
            opt.step(&mut theta, &grad, &mask);
        }
    }
    if history.is_empty() {
        return Err(match stop {
            StopReason::TooManySkipped { skipped, total, .. } => Error::TooManySkipped { skipped, total },
            _ => Error::Config("training produced no history".into()),
        });
    }
    Ok(TrainOutcome {
        best_theta: history[best_epoch].theta.clone(),
        best_epoch,
        history,
        stop,
    })
}
