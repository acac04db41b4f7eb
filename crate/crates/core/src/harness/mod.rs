//! Experiment orchestration: configuration, the three-phase pipeline,
//! evaluation, the results table, plots and run manifests.

mod config;
mod eval;
mod manifest;
mod pipeline;
mod plot;
mod selfcheck;
mod table;

use thiserror::Error;

use crate::diffcore::DiffError;
use crate::gridworld::GridError;
use crate::interpreter::InterpError;
use crate::policy::PolicyError;
use crate::trainer::TrainError;

pub use config::{desk_env, output_root, ExperimentConfig, InterpreterSettings, PolicyScale, Selection, OUT_ENV};
pub use eval::{evaluate_checkpoint, mean_std, EvalStats, GroupStats};
pub use manifest::{RunManifest, CODE_VERSION};
pub use pipeline::{
    checkpoint_path, eval_seed, eval_stage, load_matching, read_metrics, run_interpreter, run_pipeline, seed_dir,
    stages, train_stage, train_stage_from, InterpretOutput, PipelineOutput, Stage,
};
pub use selfcheck::{check_actor_gradients, check_conservation, check_decentralized, check_gae, selfcheck, CheckResult};
pub use plot::{eval_series, phase_color, training_plot, Plot, Series};
pub use table::{render_results_table, Cell, Column, EvalRecord, ResultsTable, TableRow, TASKS};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint does not match environment: {0}")]
    Mismatch(String),
    #[error("missing prerequisite checkpoint {0}")]
    MissingCheckpoint(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Interp(#[from] InterpError),
}
