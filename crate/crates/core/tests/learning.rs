mod common;

use common::rel_vec;
use diff_ilqr::ilqr::IlqrOptions;
use diff_ilqr::implicit_diff::DiffOptions;
use diff_ilqr::learning::{
    generate_dataset, imitation_loss, sysid_fit, sysid_objective, train, ExpertDataset, LearnMode, Split, StopReason,
    SysidOptions, TrainConfig,
};
use diff_ilqr::models::{default_problem, ParamTarget};
use diff_ilqr::Error;
use nalgebra::DVector;

fn dataset(model: &str, horizon: usize, count: usize, seed: u64) -> (diff_ilqr::models::Problem, ExpertDataset) {
    let prob = default_problem(model, horizon, ParamTarget::Dynamics).unwrap();
    let ds = generate_dataset(&prob, count, seed, &IlqrOptions::default()).unwrap();
    (prob, ds)
}

#[test]
fn split_sizes_and_disjointness() {
    assert_eq!(Split::count_for_train(50), 82);
    let s = Split::new(82, 3);
    assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (50, 16, 16));
    let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..82).collect::<Vec<_>>());
    assert_eq!(Split::new(82, 3), s);
    assert_ne!(Split::new(82, 4), s);
}

#[test]
fn dataset_is_deterministic_and_round_trips() {
    let (_, a) = dataset("pendulum", 6, 10, 9);
    let (_, b) = dataset("pendulum", 6, 10, 9);
    assert_eq!(a, b);
    let mut buf = Vec::new();
    a.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["x_init", "U", "X", "T", "model_id", "seed"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let back = ExpertDataset::read_jsonl(buf.as_slice(), 9).unwrap();
    assert_eq!(back, a);
    let (_, c) = dataset("pendulum", 6, 10, 10);
    assert_ne!(a.records, c.records);
}

#[test]
fn malformed_jsonl_is_an_io_error() {
    let err = ExpertDataset::read_jsonl(&b"{\"x_init\": [1.0]}\n"[..], 0).unwrap_err();
    assert!(matches!(err, Error::Io(_)));
}

#[test]
fn loss_vanishes_at_the_true_parameters() {
    let (prob, ds) = dataset("pendulum", 8, 6, 1);
    let eval = imitation_loss(&prob, &ds.records, &IlqrOptions::default(), true, &DiffOptions::default()).unwrap();
    assert!(eval.loss <= 1e-12, "{:e}", eval.loss);
    assert!(eval.grad.unwrap().amax() <= 1e-6);
    assert_eq!((eval.skipped, eval.total), (0, 6));
}

#[test]
fn imitation_gradient_matches_differences_of_the_loss() {
    let (prob, ds) = dataset("cartpole", 8, 4, 2);
    let opts = IlqrOptions {
        fp_tol: 1e-10,
        ..IlqrOptions::default()
    };
    let theta = prob.theta().component_mul(&DVector::from_vec(vec![1.1, 0.9, 1.05, 1.2]));
    let learner = prob.with_theta(&theta).unwrap();
    let g = imitation_loss(&learner, &ds.records, &opts, true, &DiffOptions::default())
        .unwrap()
        .grad
        .unwrap();
    let fd = DVector::from_fn(theta.len(), |j, _| {
        let h = 1e-5 * theta[j];
        let at = |d: f64| {
            let mut th = theta.clone();
            th[j] += d;
            imitation_loss(&prob.with_theta(&th).unwrap(), &ds.records, &opts, false, &DiffOptions::default())
                .unwrap()
                .loss
        };
        (at(h) - at(-h)) / (2.0 * h)
    });
    assert!(rel_vec(&g, &fd) <= 1e-4, "{:e}", rel_vec(&g, &fd));
}

#[test]
fn all_solves_failing_is_too_many_skipped() {
    let (prob, ds) = dataset("cartpole", 10, 4, 0);
    let opts = IlqrOptions {
        max_iter: 1,
        ..IlqrOptions::default()
    };
    let err = imitation_loss(&prob, &ds.records, &opts, false, &DiffOptions::default()).unwrap_err();
    assert!(matches!(err, Error::TooManySkipped { skipped: 4, total: 4 }));
}

#[test]
fn zero_learning_rate_keeps_theta() {
    let (prob, ds) = dataset("pendulum", 5, 8, 0);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 3,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &prob, &prob.theta(), &ds.train(), &ds.validation(), &IlqrOptions::default()).unwrap();
    assert_eq!(out.history.len(), 4);
    let first = out.history[0].theta.clone();
    assert!(out.history.iter().all(|h| h.theta == first));
    assert_eq!(first, (prob.theta() * 1.5).iter().copied().collect::<Vec<_>>());
    assert_eq!(out.stop, StopReason::Completed);
}

#[test]
fn short_training_reduces_the_loss_and_is_deterministic() {
    let (prob, ds) = dataset("pendulum", 5, 12, 5);
    let cfg = TrainConfig {
        epochs: 15,
        ..TrainConfig::default()
    };
    let run = || train(&cfg, &prob, &prob.theta(), &ds.train(), &ds.validation(), &IlqrOptions::default()).unwrap();
    let a = run();
    assert_eq!(a, run());
    assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
    assert!(a.best().validation_loss <= a.history[0].validation_loss);
}

#[test]
fn cost_mode_training_moves_only_the_active_block() {
    let prob = default_problem("pendulum", 5, ParamTarget::Cost).unwrap();
    let ds = generate_dataset(&prob, 10, 2, &IlqrOptions::default()).unwrap();
    let cfg = TrainConfig {
        mode: LearnMode::Cost,
        epochs: 4,
        alternation_period: 2,
        goal_offset: 0.1,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &prob, &prob.theta(), &ds.train(), &ds.validation(), &IlqrOptions::default()).unwrap();
    let (w, g) = (0..3, 3..6);
    let h = &out.history;
    // Epochs 1-2 update weights only, 3-4 goals only.
    assert!(g.clone().all(|i| h[2].theta[i] == h[0].theta[i]));
    assert!(w.clone().any(|i| h[2].theta[i] != h[0].theta[i]));
    assert!(w.clone().all(|i| h[4].theta[i] == h[2].theta[i]));
    assert!(g.clone().any(|i| h[4].theta[i] != h[2].theta[i]));
    assert!(g.clone().all(|i| (h[0].theta[i] - 0.1).abs() < 1e-15));
}

#[test]
fn sysid_recovers_cartpole_parameters() {
    let (prob, ds) = dataset("cartpole", 10, 6, 3);
    let truth = prob.theta();
    let res = sysid_fit(&prob, &ds.records, &(&truth * 1.5), &SysidOptions::default()).unwrap();
    assert!(res.converged && !res.underdetermined && res.rank == 4);
    let th = DVector::from_vec(res.theta.clone());
    assert!(rel_vec(&th, &truth) <= 1e-6, "{:?}", res.theta);
    assert!(res.objective < 1e-20 && res.initial_objective > 1e-6);
}

/// The pendulum step depends on θ = (m, l, g) only through `g/l` and
/// `1/(m·l²)`, so only those two combinations are recoverable.
#[test]
fn sysid_pendulum_recovers_identifiable_combinations() {
    let (prob, ds) = dataset("pendulum", 10, 6, 3);
    let t = prob.theta();
    let res = sysid_fit(&prob, &ds.records, &(&t * 1.5), &SysidOptions::default()).unwrap();
    assert!(res.converged && res.underdetermined && res.rank == 2);
    let th = &res.theta;
    let ratio = |a: f64, b: f64| (a / b - 1.0).abs();
    assert!(ratio(th[2] / th[1], t[2] / t[1]) <= 1e-6);
    assert!(ratio(th[0] * th[1] * th[1], t[0] * t[1] * t[1]) <= 1e-6);
    let (obj, grad) = sysid_objective(&prob, &ds.records, &DVector::from_vec(th.clone())).unwrap();
    assert!(obj < 1e-20 && grad.amax() < 1e-8);
}

#[test]
fn sysid_needs_states() {
    let (prob, ds) = dataset("pendulum", 5, 2, 0);
    let mut records = ds.records.clone();
    records[0].states = None;
    let err = sysid_fit(&prob, &records, &prob.theta(), &SysidOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
