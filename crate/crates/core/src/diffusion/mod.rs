//! Denoising diffusion model: noise schedule, U-Net denoiser, training,
//! checkpoints and feature extraction.

pub mod checkpoint;
pub mod extract;
pub mod layers;
pub mod params;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod unet;

use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use extract::{extract_all_layers, extract_layer_features, extraction_noise};
pub use schedule::NoiseSchedule;
pub use tensor::{FeatureMap, Scalar};
pub use train::{train, training_loss, AdamW, TrainConfig, TrainReport};
pub use unet::{Architecture, Denoiser, LayerId};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown layer id {0:?}")]
    UnknownLayer(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (lr {lr}, grad norm {grad_norm})")]
    NonFinite { step: u64, lr: f64, grad_norm: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
