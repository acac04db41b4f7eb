//! Partially observable multi-agent grid worlds: non-convex coverage, split
//! coverage and warehouse path planning.

mod config;
mod dynamics;
mod snapshot;
mod world;

pub use config::{coverage_horizon, split_horizon, Action, EnvConfig, Layout, SiPlacement, TaskKind};
pub use dynamics::{
    apply_actions, comm_graph, global_state, goal_pixel, observe, termination_check, Env, EnvMode, StepCounters,
    StepResult, GLOBAL_CHANNELS,
};
pub use snapshot::Snapshot;
pub use world::{
    flood_fill, free_components, generate_world, in_right_half, wall_column, GenerationReport, Grid, Pos, WorldState,
    MAX_GENERATION_RETRIES,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("no valid world after {retries} retries")]
    Generation { retries: usize },
    #[error("expected {expected} actions, got {got}")]
    BadActions { expected: usize, got: usize },
    #[error("agent {agent} out of range for {n} agents")]
    AgentOutOfRange { agent: usize, n: usize },
    #[error("snapshot: {0}")]
    Snapshot(String),
}
