//! Layer probing, representative selection, contrastive fine-tuning and
//! multi-level fusion.

pub mod contrastive;
pub mod fuse;
pub mod kmeans;
pub mod knn;
pub mod matrix;
pub mod probe;

use thiserror::Error;

pub use contrastive::{contrastive_finetune, infonce_loss, FinetuneConfig, FinetuneReport, TuneSample};
pub use fuse::{fuse_features, FusedFeatures};
pub use kmeans::{kmeans, select_representatives, RepresentativeSet};
pub use matrix::FeatureMatrix;
pub use probe::{knn_probe, LayerScore, ProbeConfig, ProbeReport};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
}
