//! Final classifiers, metrics and run manifests.

pub mod classifier;
pub mod manifest;
pub mod metrics;

pub use classifier::{train_classifier, Classifier, ClassifierSpec};
pub use manifest::{sha256_file, Digest, RunManifest, StageRecord};
pub use metrics::{compute_metrics, round4, MetricsReport};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("external classifier: {0}")]
    External(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
}

impl EvalError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        EvalError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
