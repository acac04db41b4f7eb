//! White-box message interpreter: a convolutional decoder trained to
//! reconstruct what an agent saw from what it transmitted, scored by masked
//! average precision.

mod decoder;
mod grid;
mod metrics;
mod samples;

use thiserror::Error;

use crate::diffcore::DiffError;
use crate::gridworld::GridError;
use crate::policy::PolicyError;

pub use decoder::{
    decoder_logits, init_decoder, masked_bce, train_decoder, Decoder, DecoderConfig, DecoderShape, EpochRecord,
    MetricsReport, P_MIN,
};
pub use grid::{column_order, quantize, reconstruct_grid, write_gray_png, ImageGrid, Panel, PanelKind};
pub use metrics::{average_precision, mean_average_precision, MapScore};
pub use samples::{
    collect_samples, sample_episode, target_for, CollectConfig, Sample, SampleSet, Split, SplitSizes, TargetKind,
    SAMPLES_MAGIC, SAMPLES_VERSION,
};

#[derive(Debug, Error)]
pub enum InterpError {
    #[error("interpreter config: {0}")]
    Config(String),
    #[error("empty sample set: {0}")]
    Empty(String),
    #[error("sample budget exhausted after {steps} steps with split counts {have:?}")]
    Budget { steps: usize, have: Vec<usize> },
    #[error("decoder loss diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("sample file: {0}")]
    Format(String),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}
