//! Experiment configuration and self-describing run directories.

mod config;
mod report;
mod run;

pub use config::{
    ContinualSection, DataSection, ExperimentConfig, MeasureSection, ModelSection, PretrainSection,
    TrainSection,
};
pub use report::{run_report, SeriesRow};
pub use run::{
    file_digest, prepare_run_dir, run_continual, run_measure, run_pretrain, run_resuscitate,
    ContinualArgs, ContinualRun, Datasets, MeasureArgs, PretrainRun, ResuscitateArgs, RunRecord,
    RUN_RECORD,
};
