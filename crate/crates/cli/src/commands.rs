use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::time::Instant;

use diff_ilqr::baselines::{finite_diff_gradient, propagate_tape, record_tape, unrolled_sensitivities};
use diff_ilqr::ilqr::{ilqr_solve, IlqrOptions, IlqrResult, Trajectory};
use diff_ilqr::implicit_diff::{implicit_backward, vjp, DiffMode, DiffOptions};
use diff_ilqr::learning::{
    compute_metrics, generate_dataset, imitation_loss, model_loss, sysid_fit, train, ExpertDataset, ExpertRecord,
    LearnMode, Split, StopReason, SysidOptions, TrainConfig,
};
use diff_ilqr::lqr::BatchPolicy;
use diff_ilqr::models::{default_problem, GoalCost, ParamTarget, Problem};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::CliError;

/// Gradcheck fails when any relative error exceeds this.
pub const GRADCHECK_TOL: f64 = 1e-3;

fn ilqr_opts(cfg: &RunConfig) -> IlqrOptions {
    IlqrOptions {
        fp_tol: cfg.fp_tol,
        max_iter: cfg.max_iter,
        ..IlqrOptions::default()
    }
}

fn write_output(cfg: &RunConfig, name: &str, body: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.output_path)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", cfg.output_path.display())))?;
    let path = cfg.output_path.join(name);
    fs::write(&path, body).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn write_summary(cfg: &RunConfig, name: &str, mut summary: serde_json::Value) -> Result<PathBuf, CliError> {
    summary["provenance"] = cfg.provenance();
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_output(cfg, name, &(text + "\n"))
}

fn theta_names(problem: &Problem) -> Vec<String> {
    let dyn_names: Vec<String> = match problem.dynamics().id() {
        "pendulum" => vec!["m".into(), "l".into(), "g".into()],
        "cartpole" => vec!["m_c".into(), "m_p".into(), "g".into(), "l".into()],
        _ => (0..problem.dyn_params().len()).map(|i| format!("a{i}")).collect(),
    };
    let cost_names: Vec<String> = if problem.cost().id() == "goal" {
        let c = GoalCost::new(problem.state_dim(), problem.control_dim());
        c.weight_indices()
            .map(|i| format!("w{i}"))
            .chain(c.goal_indices().enumerate().map(|(i, _)| format!("goal{i}")))
            .collect()
    } else {
        (0..problem.cost_params().len()).map(|i| format!("c{i}")).collect()
    };
    match problem.target() {
        ParamTarget::Dynamics => dyn_names,
        ParamTarget::Cost => cost_names,
        ParamTarget::Both => dyn_names.into_iter().chain(cost_names).collect(),
    }
}

/// Shortest round-trip form; exponent notation outside `[1e-4, 1e6)`.
fn num(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e6).contains(&a) || !a.is_finite() {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

fn fmt_row(values: &[f64]) -> String {
    values.iter().map(|v| num(*v)).collect::<Vec<_>>().join(",")
}

struct GradCase {
    learner: Problem,
    x_init: DVector<f64>,
    target: DVector<f64>,
}

/// Expert controls at the true θ from a seeded initial state; the learner
/// sits at `θ_true · U[0.8, 1.2]`.
fn grad_case(truth: &Problem, seed: u64, opts: &IlqrOptions) -> Result<GradCase, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_init = truth.dynamics().sample_initial_state(&mut rng);
    let expert = ilqr_solve(truth, &x_init, opts)?;
    expert.require_converged()?;
    let theta = truth.theta().map(|v| v * rng.gen_range(0.8..1.2));
    Ok(GradCase {
        learner: truth.with_theta(&theta)?,
        x_init,
        target: expert.traj.stacked_controls(),
    })
}

fn control_loss_grad(res: &IlqrResult, target: &DVector<f64>) -> DVector<f64> {
    let tn = res.traj.states.len() * res.traj.states[0].len();
    let mut cot = DVector::zeros(tn + target.len());
    cot.rows_mut(tn, target.len())
        .copy_from(&((res.traj.stacked_controls() - target) * (2.0 / target.len() as f64)));
    cot
}

struct GradRow {
    implicit: DVector<f64>,
    finite_diff: DVector<f64>,
    unrolled: DVector<f64>,
}

fn grad_row(cfg: &RunConfig, case: &GradCase, mode: DiffMode, opts: &IlqrOptions) -> Result<GradRow, CliError> {
    let res = ilqr_solve(&case.learner, &case.x_init, opts)?;
    res.require_converged()?;
    let diff = DiffOptions {
        mode,
        ..DiffOptions::default()
    };
    let sens = implicit_backward(&case.learner, &res, &diff)?;
    let implicit = vjp(&control_loss_grad(&res, &case.target), &sens)?;
    let target = case.target.clone();
    let loss = move |traj: &Trajectory| (traj.stacked_controls() - &target).norm_squared() / target.len() as f64;
    let finite_diff = finite_diff_gradient(&case.learner, &case.x_init, &loss, cfg.fd_step, opts, Some(&res.traj.controls))?;
    let (ures, usens) = unrolled_sensitivities(&case.learner, &case.x_init, cfg.unrolled_iterations)?;
    let unrolled = vjp(&control_loss_grad(&ures, &case.target), &usens)?;
    Ok(GradRow {
        implicit,
        finite_diff,
        unrolled,
    })
}

/// `|a_i − b_i| / max_j |b_j|`.
fn rel_errors(a: &DVector<f64>, b: &DVector<f64>) -> Vec<f64> {
    let scale = b.amax();
    (a - b)
        .iter()
        .map(|d| if scale > 0.0 { d.abs() / scale } else { d.abs() })
        .collect()
}

pub fn gradcheck(cfg: &RunConfig) -> Result<String, CliError> {
    let mode: DiffMode = cfg.mode.as_deref().unwrap_or("full").parse()?;
    let truth = default_problem(&cfg.model_id, cfg.horizon, cfg.target)?;
    let names = theta_names(&truth);
    let opts = ilqr_opts(cfg);
    let mut body = cfg.header();
    body.push_str("# errors: |g_i − fd_i| / max_j |fd_j|\n");
    body.push_str("seed,param,implicit,finite_diff,unrolled,err_implicit,err_unrolled,status\n");
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        match grad_case(&truth, seed, &opts).and_then(|case| grad_row(cfg, &case, mode, &opts)) {
            Ok(row) => {
                let ei = rel_errors(&row.implicit, &row.finite_diff);
                let eu = rel_errors(&row.unrolled, &row.finite_diff);
                for j in 0..names.len() {
                    worst = worst.max(ei[j]).max(eu[j]);
                    let _ = writeln!(
                        body,
                        "{seed},{},{},ok",
                        names[j],
                        fmt_row(&[row.implicit[j], row.finite_diff[j], row.unrolled[j], ei[j], eu[j]])
                    );
                }
            }
            Err(CliError::Solver(m)) => {
                let _ = writeln!(body, "{seed},,,,,,,\"{m}\"");
                failures.push(format!("seed {seed}: {m}"));
            }
            Err(e) => return Err(e),
        }
    }
    let path = write_output(cfg, "gradcheck.csv", &body)?;
    eprintln!("wrote {} (max error {worst:.3e})", path.display());
    if !failures.is_empty() {
        return Err(CliError::Solver(failures.join("; ")));
    }
    if worst > GRADCHECK_TOL {
        return Err(CliError::Tolerance(format!("max relative error {worst:e} > {GRADCHECK_TOL:e}")));
    }
    Ok(path.display().to_string())
}

fn time_ms(f: impl FnOnce() -> Result<(), CliError>) -> Result<f64, CliError> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

pub fn benchmark(cfg: &RunConfig) -> Result<String, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let diff = DiffOptions {
        batch: BatchPolicy::Sequential,
        ..DiffOptions::default()
    };
    let mut body = cfg.header();
    body.push_str("horizon,N,implicit_backward_ms,unrolled_ms,ratio\n");
    for horizon in cfg.benchmark_horizons() {
        let prob = default_problem(&cfg.model_id, horizon, ParamTarget::Dynamics)?;
        let x_init = prob
            .dynamics()
            .sample_initial_state(&mut ChaCha8Rng::seed_from_u64(cfg.seeds[0]));
        let mut cells = Vec::with_capacity(cfg.iteration_counts.len());
        for &n in &cfg.iteration_counts {
            let (res, tape) = record_tape(&prob, &x_init, n, true)?;
            res.require_converged()?;
            cells.push((res, tape));
        }
        // Rounds cycle over all counts so drift in machine speed hits every
        // cell alike; round 0 is the warm-up.
        let mut samples = vec![(Vec::new(), Vec::new()); cells.len()];
        pool.install(|| -> Result<(), CliError> {
            for round in 0..=cfg.repetitions {
                for ((res, tape), (imp, unr)) in cells.iter().zip(samples.iter_mut()) {
                    let i = time_ms(|| {
                        implicit_backward(&prob, res, &diff)?;
                        Ok(())
                    })?;
                    let u = time_ms(|| {
                        propagate_tape(tape)?;
                        Ok(())
                    })?;
                    if round > 0 {
                        imp.push(i);
                        unr.push(u);
                    }
                }
            }
            Ok(())
        })?;
        for (&n, (imp, unr)) in cfg.iteration_counts.iter().zip(samples) {
            let (implicit, unrolled) = (median(imp), median(unr));
            let _ = writeln!(
                body,
                "{horizon},{n},{implicit:.4},{unrolled:.4},{:.3}",
                unrolled / implicit
            );
        }
    }
    let path = write_output(cfg, "benchmark.csv", &body)?;
    eprintln!("wrote {}", path.display());
    Ok(path.display().to_string())
}

/// The records for one trial: read from `dataset_path` or generated with
/// `seed`, sized so the training split holds `train_size` records.
fn load_dataset(cfg: &RunConfig, expert: &Problem, seed: u64) -> Result<ExpertDataset, CliError> {
    let ds = match &cfg.dataset_path {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
            ExpertDataset::read_jsonl(BufReader::new(file), seed)?
        }
        None => generate_dataset(expert, Split::count_for_train(cfg.train_size), seed, &ilqr_opts(cfg))?,
    };
    let bad = ds
        .records
        .iter()
        .find(|r| r.model_id != cfg.model_id || r.horizon != cfg.horizon);
    if let Some(r) = bad {
        return Err(CliError::Config(format!(
            "dataset record is for {} with T={}, config asks for {} with T={}",
            r.model_id, r.horizon, cfg.model_id, cfg.horizon
        )));
    }
    if ds.split.train.is_empty() || ds.split.test.is_empty() {
        return Err(CliError::Config("dataset too small to split".into()));
    }
    Ok(ds)
}

fn train_records(cfg: &RunConfig, ds: &ExpertDataset) -> Vec<ExpertRecord> {
    let mut train = ds.train();
    train.truncate(cfg.train_size);
    train
}

pub fn imitate(cfg: &RunConfig) -> Result<String, CliError> {
    let mode: LearnMode = cfg.mode.as_deref().unwrap_or("dx").parse()?;
    if mode == LearnMode::Sysid {
        return Err(CliError::Config("use the sysid subcommand for system identification".into()));
    }
    let cost = mode == LearnMode::Cost;
    let expert = default_problem(&cfg.model_id, cfg.horizon, mode.target())?;
    let truth = expert.theta();
    let names = theta_names(&expert);
    let opts = ilqr_opts(cfg);
    let mut body = cfg.header();
    let _ = writeln!(
        body,
        "seed,epoch,train_loss,validation_loss,model_loss,skipped,{}",
        names.join(",")
    );
    let mut trials = Vec::new();
    let mut finals = Vec::new();
    let mut curves = Vec::new();
    for &seed in &cfg.seeds {
        let ds = load_dataset(cfg, &expert, seed)?;
        let tc = TrainConfig {
            mode,
            learning_rate: cfg.learning_rate,
            epochs: cfg.epochs,
            train_size: cfg.train_size,
            seed,
            init_jitter: cfg.init_jitter.unwrap_or(if cost { 0.2 } else { 0.0 }),
            goal_offset: cfg.goal_offset.unwrap_or(if cost { 0.1 } else { 0.0 }),
            ..TrainConfig::default()
        };
        let out = train(&tc, &expert, &truth, &train_records(cfg, &ds), &ds.validation(), &opts)?;
        for h in &out.history {
            let _ = writeln!(
                body,
                "{seed},{},{},{},{}",
                h.epoch,
                fmt_row(&[h.train_loss, h.validation_loss, h.model_loss]),
                h.skipped,
                fmt_row(&h.theta)
            );
        }
        let best = DVector::from_vec(out.best_theta.clone());
        let test = imitation_loss(&expert.with_theta(&best)?, &ds.test(), &opts, false, &DiffOptions::default())?;
        let first = &out.history[0];
        let last = out.history.last().expect("history is nonempty");
        trials.push(serde_json::json!({
            "seed": seed,
            "stop": out.stop,
            "completed": out.stop == StopReason::Completed,
            "best_epoch": out.best_epoch,
            "best_theta": out.best_theta,
            "initial_train_loss": first.train_loss,
            "final_train_loss": last.train_loss,
            "best_validation_loss": out.best().validation_loss,
            "test_loss": test.loss,
            "initial_model_loss": first.model_loss,
            "final_model_loss": last.model_loss,
            "best_model_loss": model_loss(&best, &truth),
        }));
        curves.push(out.history.iter().map(|h| h.train_loss).collect::<Vec<_>>());
        finals.push(best);
    }
    let metrics = compute_metrics(&curves[0], &[], &finals, &truth);
    let csv = write_output(cfg, "imitate.csv", &body)?;
    let json = write_summary(
        cfg,
        "imitate.json",
        serde_json::json!({
            "mode": mode,
            "theta_names": names,
            "theta_true": truth.as_slice(),
            "trials": trials,
            "bad_values": metrics.bad_values,
            "bad_value_ratio": metrics.bad_value_ratio,
        }),
    )?;
    eprintln!("wrote {} and {}", csv.display(), json.display());
    Ok(json.display().to_string())
}

pub fn sysid(cfg: &RunConfig) -> Result<String, CliError> {
    let expert = default_problem(&cfg.model_id, cfg.horizon, ParamTarget::Dynamics)?;
    let truth = expert.theta();
    let names = theta_names(&expert);
    let opts = ilqr_opts(cfg);
    let init_scale = TrainConfig::default().init_scale;
    let mut body = cfg.header();
    let _ = writeln!(
        body,
        "seed,iterations,objective,rank,underdetermined,converged,test_imitation_loss,model_loss,{}",
        names.join(",")
    );
    let mut trials = Vec::new();
    let mut finals = Vec::new();
    for &seed in &cfg.seeds {
        let ds = load_dataset(cfg, &expert, seed)?;
        let fit = sysid_fit(&expert, &train_records(cfg, &ds), &(&truth * init_scale), &SysidOptions::default())?;
        let theta = DVector::from_vec(fit.theta.clone());
        // Controller rollout with the identified model.
        let test = imitation_loss(&expert.with_theta(&theta)?, &ds.test(), &opts, false, &DiffOptions::default())?;
        let ml = model_loss(&theta, &truth);
        let _ = writeln!(
            body,
            "{seed},{},{},{},{},{},{},{},{}",
            fit.iterations,
            num(fit.objective),
            fit.rank,
            fit.underdetermined,
            fit.converged,
            num(test.loss),
            num(ml),
            fmt_row(&fit.theta)
        );
        trials.push(serde_json::json!({
            "seed": seed,
            "fit": fit,
            "test_imitation_loss": test.loss,
            "skipped": test.skipped,
            "model_loss": ml,
        }));
        finals.push(theta);
    }
    let metrics = compute_metrics(&[], &[], &finals, &truth);
    let csv = write_output(cfg, "sysid.csv", &body)?;
    let json = write_summary(
        cfg,
        "sysid.json",
        serde_json::json!({
            "theta_names": names,
            "theta_true": truth.as_slice(),
            "trials": trials,
            "bad_values": metrics.bad_values,
            "bad_value_ratio": metrics.bad_value_ratio,
        }),
    )?;
    eprintln!("wrote {} and {}", csv.display(), json.display());
    Ok(json.display().to_string())
}

pub fn dataset(cfg: &RunConfig) -> Result<String, CliError> {
    let expert = default_problem(&cfg.model_id, cfg.horizon, ParamTarget::Dynamics)?;
    let seed = cfg.seeds[0];
    let ds = generate_dataset(&expert, Split::count_for_train(cfg.train_size), seed, &ilqr_opts(cfg))?;
    let mut buf = cfg.header().into_bytes();
    ds.write_jsonl(&mut buf)?;
    let body = String::from_utf8(buf).expect("JSON output is UTF-8");
    let path = write_output(cfg, "dataset.jsonl", &body)?;
    eprintln!("wrote {} ({} records)", path.display(), ds.records.len());
    Ok(path.display().to_string())
}
