use std::path::{Path, PathBuf};

use clap::Args;
use diff_ilqr::models::{dynamics_by_id, ParamTarget};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Everything a run depends on. Echoed into every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub model_id: String,
    pub horizon: usize,
    /// Benchmark horizons; empty means `[horizon]`.
    pub horizons: Vec<usize>,
    pub fp_tol: f64,
    pub max_iter: usize,
    /// gradcheck: `full` or `last-layer`; imitate: `dx` or `cost`.
    pub mode: Option<String>,
    /// gradcheck: which parameters to differentiate.
    pub target: ParamTarget,
    pub seeds: Vec<u64>,
    /// Output directory.
    pub output_path: PathBuf,
    pub iteration_counts: Vec<usize>,
    pub repetitions: usize,
    pub train_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// imitate: per-entry multiplicative jitter of the initial θ̂;
    /// defaults to 0.2 in cost mode, 0 otherwise.
    pub init_jitter: Option<f64>,
    /// imitate: offset added to the initial goal entries; defaults to 0.1
    /// in cost mode.
    pub goal_offset: Option<f64>,
    /// Relative central-difference step.
    pub fd_step: f64,
    /// gradcheck: iterations of the unrolled baseline.
    pub unrolled_iterations: usize,
    /// Existing JSONL dataset; generated from the seed when absent.
    pub dataset_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            model_id: "pendulum".into(),
            horizon: 10,
            horizons: Vec::new(),
            fp_tol: 1e-8,
            max_iter: 200,
            mode: None,
            target: ParamTarget::Dynamics,
            seeds: vec![0],
            output_path: PathBuf::from("results"),
            iteration_counts: vec![50, 100, 200, 300],
            repetitions: 5,
            train_size: 50,
            epochs: 500,
            learning_rate: 1e-2,
            init_jitter: None,
            goal_offset: None,
            fd_step: 1e-5,
            unrolled_iterations: 100,
            dataset_path: None,
        }
    }
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON config file (same keys as the echoed config)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// pendulum, cartpole or linear-test
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Benchmark horizons, comma separated
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    #[arg(long)]
    pub fp_tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// full | last-layer (gradcheck), dx | cost (imitate)
    #[arg(long)]
    pub mode: Option<String>,
    /// dynamics | cost | both (gradcheck)
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Forced iteration counts for the benchmark, comma separated
    #[arg(long, value_delimiter = ',')]
    pub iteration_counts: Option<Vec<usize>>,
    /// Timed repetitions per benchmark cell (at least 5)
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Initial-guess jitter in [0, 1) (imitate)
    #[arg(long)]
    pub init_jitter: Option<f64>,
    /// Initial goal offset (imitate, cost mode)
    #[arg(long)]
    pub goal_offset: Option<f64>,
    #[arg(long)]
    pub fd_step: Option<f64>,
    #[arg(long)]
    pub unrolled_iterations: Option<usize>,
    /// Read expert records from this JSONL file instead of generating them
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

fn parse_target(s: &str) -> Result<ParamTarget, CliError> {
    match s {
        "dynamics" => Ok(ParamTarget::Dynamics),
        "cost" => Ok(ParamTarget::Cost),
        "both" => Ok(ParamTarget::Both),
        other => Err(CliError::Config(format!("unknown target {other:?} (expected dynamics, cost or both)"))),
    }
}

fn read_file(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))
}

impl RunConfig {
    /// Config file (if any), then flags, then validation.
    pub fn resolve(command: &str, o: &Overrides) -> Result<Self, CliError> {
        let mut c = match &o.config {
            Some(path) => read_file(path)?,
            None => RunConfig::default(),
        };
        c.command = command.to_string();
        if let Some(v) = &o.model {
            c.model_id = v.clone();
        }
        if let Some(v) = o.horizon {
            c.horizon = v;
        }
        if let Some(v) = &o.horizons {
            c.horizons = v.clone();
        }
        if let Some(v) = o.fp_tol {
            c.fp_tol = v;
        }
        if let Some(v) = o.max_iter {
            c.max_iter = v;
        }
        if let Some(v) = &o.mode {
            c.mode = Some(v.clone());
        }
        if let Some(v) = &o.target {
            c.target = parse_target(v)?;
        }
        if let Some(v) = &o.seeds {
            c.seeds = v.clone();
        }
        if let Some(v) = &o.output {
            c.output_path = v.clone();
        }
        if let Some(v) = &o.iteration_counts {
            c.iteration_counts = v.clone();
        }
        if let Some(v) = o.repetitions {
            c.repetitions = v;
        }
        if let Some(v) = o.train_size {
            c.train_size = v;
        }
        if let Some(v) = o.epochs {
            c.epochs = v;
        }
        if let Some(v) = o.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = o.init_jitter {
            c.init_jitter = Some(v);
        }
        if let Some(v) = o.goal_offset {
            c.goal_offset = Some(v);
        }
        if let Some(v) = o.fd_step {
            c.fd_step = v;
        }
        if let Some(v) = o.unrolled_iterations {
            c.unrolled_iterations = v;
        }
        if let Some(v) = &o.dataset {
            c.dataset_path = Some(v.clone());
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        dynamics_by_id(&self.model_id)?;
        let checks = [
            (self.horizon > 0, "horizon must be at least 1"),
            (self.horizons.iter().all(|h| *h > 0), "horizons must be at least 1"),
            (self.fp_tol > 0.0 && self.fp_tol.is_finite(), "fp_tol must be positive"),
            (self.max_iter > 0, "max_iter must be at least 1"),
            (!self.seeds.is_empty(), "seeds must not be empty"),
            (self.repetitions >= 5, "repetitions must be at least 5"),
            (self.train_size > 0, "train_size must be at least 1"),
            (
                self.init_jitter.map_or(true, |j| (0.0..1.0).contains(&j)),
                "init_jitter must lie in [0, 1)",
            ),
            (self.goal_offset.map_or(true, f64::is_finite), "goal_offset must be finite"),
            (self.fd_step > 0.0 && self.fd_step.is_finite(), "fd_step must be positive"),
            (self.unrolled_iterations > 0, "unrolled_iterations must be at least 1"),
            (self.learning_rate >= 0.0 && self.learning_rate.is_finite(), "learning_rate must be ≥ 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(CliError::Config(msg.into()));
            }
        }
        if self.command == "benchmark" && (self.iteration_counts.is_empty() || self.iteration_counts.contains(&0)) {
            return Err(CliError::Config("iteration_counts must be a nonempty list of positive counts".into()));
        }
        Ok(())
    }

    pub fn benchmark_horizons(&self) -> Vec<usize> {
        if self.horizons.is_empty() {
            vec![self.horizon]
        } else {
            self.horizons.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Comment lines opening every text output.
    pub fn header(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!(
            "# config: {}\n# config_sha256: {}\n# seed: {}\n# version: diff-ilqr {}\n",
            self.to_json(),
            self.sha256(),
            seeds.join(","),
            diff_ilqr::VERSION
        )
    }

    /// The same provenance as a JSON object.
    pub fn provenance(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self,
            "config_sha256": self.sha256(),
            "seed": self.seeds,
            "version": diff_ilqr::VERSION,
        })
    }
}
