//! Total loss, Adam with step decay, the training loop and the
//! pathology-only inference path.

mod config;
mod model;
mod optim;
mod trainer;

pub use config::{lr_at, ConfigOverrides, StepUnit, TrainConfig};
pub use model::{
    forward_backward, forward_batch, mse_loss, predict, predict_rows, LossBreakdown, ModelParams, Neighborhood,
    SpotBatch, TrainData,
};
pub use optim::{adam_step, Adam, BETA1, BETA2, EPSILON};
pub use trainer::{batch_indices, predict_dataset, train, EpochRecord, TrainReport, Trainer};
