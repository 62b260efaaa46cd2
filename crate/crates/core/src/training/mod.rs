//! Optimizer, learning-rate schedule, pretraining and continual-learning loops.

mod continual;
mod optim;
mod schedule;
mod trainer;

pub use continual::{
    continual_train, injection_interval, read_audit, write_audit, AuditRow, ContinualOutcome,
    InjectionPlan,
};
pub use optim::{AdamWConfig, OptimizerState};
pub use schedule::Schedule;
pub use trainer::{
    batch_gradient, batch_indices, checkpoint_steps, pretrain, write_train_log, PretrainOutcome,
    StepLog, TrainConfig,
};
