//! Conditional denoising-diffusion optical-flow estimator for particle image
//! pairs: dual encoders, correlation pyramid, time-embedding enhancement,
//! recurrent denoising decoder, the 2x scale-adaptation wrapper and the
//! fine-tuning harness.

pub mod checkpoint;
pub mod config;
pub mod corr;
pub mod encoder;
pub mod estimate;
pub mod layers;
pub mod model;
mod ops;
pub mod params;
pub mod train;
pub mod update;

use pivdiff_core::diffusion::DiffusionError;
use pivdiff_core::types::TypeError;
use thiserror::Error;

pub use checkpoint::{remap_checkpoint, Checkpoint, RemapAudit};
pub use config::{Activation, Fusion, ModelConfig};
pub use estimate::{estimate, ConstantFlowModel, FlowModel};
pub use model::{Conditions, DiffuserNet};
pub use train::{l1_flow_loss, one_cycle_lr, train, TrainConfig};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input {height}x{width} is not divisible by 8")]
    DimensionNotDivisible { height: usize, width: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("loss mask selects no pixels")]
    EmptyMask,
    #[error("non-finite loss at step {step}; batch: {batch_ids:?}")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("training precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
