//! Experiment runner: configuration, training, evaluation, baselines,
//! comparison tables and the gradient-check suite.

mod checkpoint;
mod compare;
mod config;
mod gradcheck;
mod train;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, model_from_checkpoint_bytes, save_checkpoint, CheckpointHeader,
};
pub use compare::{collect_reports, compare, comparison_table, plot_loss_curves, ComparisonTable};
pub use config::ExperimentConfig;
pub use gradcheck::{check_objective, gradcheck_suite, toy_batch, toy_model, GradcheckOptions, GradcheckResult};
pub use train::{
    best_by_rank, evaluate, load_or_generate, metric_name, run_stl_baselines, single_task_dataset, stl_metrics, train,
    train_on, write_loss_log, write_metric_log, write_outputs, EpochRecord, ExperimentReport, StepRecord, TrainOutcome,
};
