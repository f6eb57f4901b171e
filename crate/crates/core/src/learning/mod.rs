//! Imitation learning and system identification from expert demonstrations.

mod dataset;
mod metrics;
mod sysid;
mod train;

pub use dataset::{generate_dataset, ExpertDataset, ExpertRecord, Split, MAX_DRAWS_PER_RECORD};
pub use metrics::{bad_value_count, compute_metrics, model_loss, BadValueCount, Metrics};
pub use sysid::{sysid_fit, sysid_objective, SysidOptions, SysidResult};
pub use train::{
    imitation_loss, initial_theta, train, update_mask, EpochRecord, LearnMode, LossEval, RmsProp, StopReason,
    TrainConfig, TrainOutcome, DIVERGENCE_LOSS, MAX_SKIPPED_FRACTION,
};
