//! Experiment harness: declarative run configuration, evaluation metrics,
//! and the command implementations behind the CLI verbs.

mod config;
mod metrics;
mod commands;

pub use commands::{
    cmd_evaluate, cmd_generate, cmd_modes, cmd_sweep_range, cmd_train, RunReport, SeedOutcome,
    SweepReport, SweepRow,
};
pub use config::{DatasetSpec, ExperimentConfig, ModelKind, ModelSpec};
pub use metrics::{evaluate_dmd, evaluate_koopman, frequency_mae, EvalMetrics, MetricsReport};
