//! Training stages, checkpoints, evaluation, cost accounting, ablations and
//! reporting.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod eval;
pub mod models;
pub mod report;
pub mod train;

pub use checkpoint::{file_hash, Checkpoint};
pub use config::{FoseConfig, StageConfig};
pub use train::{loss_window, run_stage, synthesize, RunOptions, StageOutcome};
pub use cost::{count_cost, CostReport};
pub use eval::{evaluate, Evaluation, InferenceOptions, Method};
pub use ablate::{ablate, AblateOptions, AblationKind, Table};
pub use report::emit_report;
