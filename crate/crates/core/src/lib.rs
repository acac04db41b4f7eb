//! Heterogeneous aggregation graph neural networks with a shared differentiable
//! communication channel, cooperative and self-interested policy gradients,
//! partially observable multi-agent grid worlds, and a white-box interpreter for
//! the messages agents exchange.

pub mod diffcore;
pub mod graphnet;
pub mod gridworld;
pub mod harness;
pub mod interpreter;
pub mod policy;
pub mod trainer;
