//! Two-stage training and inference driver.

pub mod config;
pub mod layout;
pub mod metrics;
pub mod optim;
pub mod train;

pub use config::{OptimizerKind, RationaleSource, TrainConfig};
pub use layout::{extract_answer, Extracted};
pub use metrics::rouge_l;
pub use train::{
    infer_two_stage, run_two_stage, train_answer_stage, train_rationale_stage, Inference,
    RunSummary, StageLog, TwoStageRun,
};
