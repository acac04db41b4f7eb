//! Minimal reverse-mode differentiation: tensors, a recording graph, parameter
//! trees with a binary checkpoint format, optimizers, and a finite-difference
//! gradient checker.

mod graph;
pub mod init;
mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, rel_err, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var};
pub use optim::{optimizer_step, Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{ParamTree, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tensor::{Scalar, Tensor};


use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("loss must be a single element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite values after {0}")]
    NonFinite(&'static str),
    #[error("parameter structure mismatch: {0}")]
    Structure(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
