//! Losses, optimizer and the alternating model/graph training loop.

mod baseline;
mod config;
mod loss;
mod optim;
mod trainer;

pub use baseline::{train_plain_gcn, PlainGcnRun};
pub use config::{SelectBy, Separation, Settings, TrainConfig, Variant};
pub use loss::{adv_loss, cls_loss, ent_loss, EntDomainTerm, LossBreakdown};
pub use optim::AdamW;
pub use trainer::{
    grl_schedule, run_training, run_training_with, EpochMetrics, LossNodes, Objective, TrainOutcome,
};
