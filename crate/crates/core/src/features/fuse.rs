//! Concatenating the optimal layer's features with its neighbours'.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureMatrix};
use crate::diffusion::LayerId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedFeatures {
    pub matrix: FeatureMatrix,
    /// Component layers in concatenation order.
    pub components: Vec<LayerId>,
}

/// The layer itself plus whichever forward-order neighbours exist.
pub fn fusion_components(best: LayerId) -> Vec<LayerId> {
    let i = best.index();
    LayerId::ALL[i.saturating_sub(1)..(i + 2).min(LayerId::ALL.len())].to_vec()
}

pub fn fuse_features(
    layers: &BTreeMap<LayerId, FeatureMatrix>,
    best: LayerId,
) -> Result<FusedFeatures, FeatureError> {
    let components: Vec<LayerId> = fusion_components(best)
        .into_iter()
        .filter(|l| layers.contains_key(l))
        .collect();
    if !components.contains(&best) {
        return Err(FeatureError::Input(format!("no features for layer {best}")));
    }
    let mats: Vec<&FeatureMatrix> = components.iter().map(|l| &layers[l]).collect();
    let n = mats[0].n();
    if let Some(bad) = mats.iter().find(|m| m.n() != n || m.labels() != mats[0].labels()) {
        return Err(FeatureError::Dimension(format!(
            "cannot fuse {} rows with {n} rows",
            bad.n()
        )));
    }
    let dim: usize = mats.iter().map(|m| m.dim()).sum();
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        for m in &mats {
            data.extend_from_slice(m.row(i));
        }
    }
    Ok(FusedFeatures {
        matrix: FeatureMatrix::new(data, dim, mats[0].labels().to_vec(), None)?,
        components,
    })
}
