//! Aggregation graph neural network channel.

mod conv;
mod local;
mod shift;

pub use conv::{
    agnn_forward, graph_conv, graph_conv_on, hetero_graph_conv, hetero_graph_conv_on, shifted_signals, FilterBank,
    HeteroFilterBank, MessageMatrix, Nonlinearity, TapeBank, LEAKY_SLOPE,
};
pub use local::{local_node_execute, run_decentralized, LocalNode, LocalOutput};
pub use shift::{GraphShiftOperator, Normalization, ShiftConfig};

use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("agent {agent} out of range for {n} agents")]
    AgentOutOfRange { agent: usize, n: usize },
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("filter bank without taps")]
    EmptyBank,
    #[error("agent {agent} missing aggregate from neighbour {neighbor} for hop {hop}")]
    MissingNeighbor { agent: usize, neighbor: usize, hop: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}
