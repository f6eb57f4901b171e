use std::io::{BufRead, Write};

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ilqr::{ilqr_solve, IlqrOptions};
use crate::models::Problem;

/// Fresh initial-state draws allowed per record before giving up.
pub const MAX_DRAWS_PER_RECORD: usize = 20;

/// One expert demonstration. Serialized as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRecord {
    pub x_init: Vec<f64>,
    #[serde(rename = "U")]
    pub controls: Vec<Vec<f64>>,
    /// Expert states `x_1..x_T`, used by system identification.
    #[serde(rename = "X", default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<Vec<f64>>>,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub model_id: String,
    pub seed: u64,
}

impl ExpertRecord {
    pub fn x_init_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x_init)
    }

    /// Controls stacked as `(u_1, …, u_T)`.
    pub fn stacked_controls(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.controls.iter().map(Vec::len).sum(),
            self.controls.iter().flatten().copied(),
        )
    }
}

/// Record indices of each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Validation and test each get 20% of the records (rounded), training
    /// the rest; assignment is a seeded shuffle.
    pub fn new(count: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..count).collect();
        // Offset so the split stream differs from the initial-state stream.
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        let held = (count as f64 * 0.2).round() as usize;
        let test = idx.split_off(count - held);
        let validation = idx.split_off(idx.len() - held);
        Self {
            train: idx,
            validation,
            test,
        }
    }

    /// Smallest record count whose split leaves at least `train` records
    /// for training.
    pub fn count_for_train(train: usize) -> usize {
        let mut count = train;
        while count - 2 * ((count as f64 * 0.2).round() as usize) < train {
            count += 1;
        }
        count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDataset {
    pub records: Vec<ExpertRecord>,
    pub split: Split,
}

impl ExpertDataset {
    pub fn new(records: Vec<ExpertRecord>, seed: u64) -> Self {
        let split = Split::new(records.len(), seed);
        Self { records, split }
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<ExpertRecord> {
        idx.iter().map(|&i| self.records[i].clone()).collect()
    }

    pub fn train(&self) -> Vec<ExpertRecord> {
        self.subset(&self.split.train)
    }

    pub fn validation(&self) -> Vec<ExpertRecord> {
        self.subset(&self.split.validation)
    }

    pub fn test(&self) -> Vec<ExpertRecord> {
        self.subset(&self.split.test)
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads records written by [`ExpertDataset::write_jsonl`] and splits
    /// them with `seed`.
    pub fn read_jsonl(input: impl BufRead, seed: u64) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let rec: ExpertRecord =
                serde_json::from_str(&line).map_err(|e| Error::Io(format!("dataset line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Ok(Self::new(records, seed))
    }
}

/// Solves the expert problem from `count` initial states drawn uniformly
/// from the model's sampling box. Deterministic in `seed`.
///
/// A draw whose solve does not converge is replaced by a fresh draw; after
/// [`MAX_DRAWS_PER_RECORD`] consecutive failures the call fails.
pub fn generate_dataset(expert: &Problem, count: usize, seed: u64, opts: &IlqrOptions) -> Result<ExpertDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    while records.len() < count {
        let mut last_err = None;
        let mut done = false;
        for _ in 0..MAX_DRAWS_PER_RECORD {
            let x0 = expert.dynamics().sample_initial_state(&mut rng);
            match ilqr_solve(expert, &x0, opts) {
                Ok(res) if res.converged => {
                    records.push(ExpertRecord {
                        x_init: x0.iter().copied().collect(),
                        controls: res.traj.controls.iter().map(|u| u.iter().copied().collect()).collect(),
                        states: Some(res.traj.states.iter().map(|x| x.iter().copied().collect()).collect()),
                        horizon: expert.horizon(),
                        model_id: expert.dynamics().id().to_string(),
                        seed,
                    });
                    done = true;
                    break;
                }
                Ok(res) => {
                    last_err = Some(Error::NotConverged {
                        iterations: res.iterations,
                        residual: res.residual,
                    })
                }
                Err(e) => last_err = Some(e),
            }
        }
        if !done {
            // Report the solver failure of the last draw.
            return Err(last_err.unwrap_or(Error::NotConverged {
                iterations: 0,
                residual: f64::NAN,
            }));
        }
    }
    Ok(ExpertDataset::new(records, seed))
}
