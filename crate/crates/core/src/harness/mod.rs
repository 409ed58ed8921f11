//! Experiment configuration, checkpoints and the end-to-end pipelines behind
//! the command-line verbs.

mod checkpoint;
mod config;
mod run;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{layout_for, ExperimentConfig, CONFIG_KEYS};
pub use run::{
    generate, inspect_attention, loss_csv, model_with, run_ablation, run_eval, run_inspect_attention, run_profile,
    run_sample, run_training, sample_and_evaluate, shape_for, step_rng, training_examples, AblationMode,
    AblationReport, AttentionMaps, ProfileOutput, SampleMode, TrainSummary, Trainer,
};
