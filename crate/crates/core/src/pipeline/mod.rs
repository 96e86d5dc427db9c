//! Training orchestration, evaluation, ablation, checkpointing,
//! configuration, and the metrics stream.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod train;

pub use ablate::{ablate, AblationRow, AblationTable};
pub use checkpoint::Checkpoint;
pub use config::{Toggles, TrainConfig};
pub use eval::{evaluate, redirect, EvalSummary};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter};
pub use model::{ForwardOut, GazeModel};
pub use train::{
    load_checkpoint, prepare, prepare_with_estimator, save_checkpoint, train_end_to_end,
    train_stage_init, train_until, InitReport, TrainArtifacts,
};
