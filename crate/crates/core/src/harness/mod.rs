//! Synthetic tasks, experiment configuration and the end-to-end pipeline.

mod config;
mod pipeline;
mod tasks;

pub use config::{ExperimentConfig, Method, OUT_ENV};
pub use pipeline::{
    apply_method, attribute_and_pair, cka_conditions, run_pipeline, run_pipeline_with_outputs, train_model,
    validation_curves, Artifact, Metrics, PipelineOutputs, RunManifest, StageFailure,
};
pub use tasks::{evaluate_accuracy, generate_dataset, Dataset, TaskKind, TaskSpec, BOS, FIRST_SYMBOL, SEP};
