use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// `mean((θ − θ̂)²)`.
pub fn model_loss(theta_hat: &DVector<f64>, theta_true: &DVector<f64>) -> f64 {
    if theta_true.is_empty() {
        return 0.0;
    }
    (theta_hat - theta_true).norm_squared() / theta_true.len() as f64
}

/// Negative entries among a set of learned physical parameter vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadValueCount {
    pub negative: usize,
    pub total: usize,
}

impl BadValueCount {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.negative as f64 / self.total as f64
        }
    }
}

/// Counts negative entries over final checkpoints (one per trial).
pub fn bad_value_count(checkpoints: &[DVector<f64>]) -> BadValueCount {
    BadValueCount {
        negative: checkpoints.iter().flat_map(|c| c.iter()).filter(|v| **v < 0.0).count(),
        total: checkpoints.iter().map(|c| c.len()).sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub imitation_loss: Vec<f64>,
    pub model_loss: Vec<f64>,
    pub bad_values: BadValueCount,
    pub bad_value_ratio: f64,
}

/// Model loss along a θ̂ history and the bad-value ratio over the final
/// checkpoints of several trials.
pub fn compute_metrics(
    imitation_loss: &[f64],
    theta_history: &[DVector<f64>],
    final_checkpoints: &[DVector<f64>],
    theta_true: &DVector<f64>,
) -> Metrics {
    let bad_values = bad_value_count(final_checkpoints);
    Metrics {
        imitation_loss: imitation_loss.to_vec(),
        model_loss: theta_history.iter().map(|th| model_loss(th, theta_true)).collect(),
        bad_value_ratio: bad_values.ratio(),
        bad_values,
    }
}
