//! Rollouts, advantage estimation, the cooperative and self-interested PPO
//! updates, the three-phase schedule, and an exactly solvable tabular game for
//! checking the gradient estimators.

mod gae;
mod phase;
mod ppo;
mod rollout;
pub mod tabular;

use thiserror::Error;

use crate::diffcore::DiffError;
use crate::gridworld::GridError;
use crate::policy::PolicyError;

pub use gae::{compute_gae, standardize, td_residuals, AdvantageEstimate};
pub use phase::{run_phase, MetricsRecord, Phase, PhaseOutcome, PhaseSpec};
pub use ppo::{
    cooperative_update, loss_gradients, minibatch_loss, ppo_update, prepare_batch, readapt_update,
    self_interested_update, MinibatchLoss, PreparedStep, TrainerConfig, UpdateKind, UpdateMetrics,
};
pub use rollout::{collect_rollouts, run_episode, ActionSelection, StepRecord, Trajectory};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("trainer config: {0}")]
    Config(String),
    #[error("misaligned data: {0}")]
    Misaligned(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("environment failed after {steps_collected} steps: {source}")]
    Env {
        steps_collected: usize,
        #[source]
        source: GridError,
    },
    #[error("frozen parameter {0} changed")]
    Frozen(String),
    #[error("metrics output: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}
