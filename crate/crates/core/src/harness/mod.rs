//! Training loop, evaluation, multi-seed experiments and run outputs.

pub mod config;
pub mod curves;
pub mod experiment;
pub mod gradcheck;
pub mod optim;
pub mod output;
pub mod train;

pub use config::{
    parse_layers, SelectionMetric, SelectionSplit, TaskSpec, TrainConfig, TrainSize, DEFAULT_SEEDS,
};
pub use curves::{emit_curves, load_curves, CurveRow};
pub use experiment::{VariantSummary, 
    pad_study_variants, run_experiment, variant_label, Experiment, ExperimentSummary, MeanSe,
};
pub use optim::{optimizer_step, AdamState};
pub use output::write_run;
pub use train::{evaluate, predict, train, EpochMetrics, RunResult, TrainedRun};
