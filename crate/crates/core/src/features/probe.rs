//! Cross-validated k-NN probing of per-layer features.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{knn, FeatureError, FeatureMatrix};
use crate::diffusion::LayerId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: LayerId,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub scores: Vec<LayerScore>,
    pub best: LayerId,
    pub folds: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub k: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k: 5,
            folds: 5,
            seed: 0,
        }
    }
}

fn cmp_rows(a: &[f32], b: &[f32]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Sample order that depends only on content: by label, then by the
/// concatenation of every layer's row.
pub fn canonical_order(layers: &[&FeatureMatrix]) -> Vec<usize> {
    let labels = layers[0].labels();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| {
        labels[a].cmp(&labels[b]).then_with(|| {
            layers
                .iter()
                .map(|m| cmp_rows(m.row(a), m.row(b)))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    });
    order
}

/// Fold id of every sample. Each class, in canonical order, is shuffled with
/// the seed and dealt round-robin across folds.
pub fn stratified_folds(labels: &[usize], canonical: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut fold_of = vec![0; labels.len()];
    for class in 0..classes {
        let mut members: Vec<usize> = canonical.iter().copied().filter(|&i| labels[i] == class).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0xa076_1d64_78bd_642f));
        members.shuffle(&mut rng);
        for (pos, i) in members.into_iter().enumerate() {
            fold_of[i] = pos % folds;
        }
    }
    fold_of
}

/// Fold count actually used: reduced to the smallest class size, never
/// below 2.
pub fn effective_folds(labels: &[usize], requested: usize) -> usize {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let smallest = (0..classes)
        .map(|c| labels.iter().filter(|&&l| l == c).count())
        .filter(|&n| n > 0)
        .min()
        .unwrap_or(0);
    let folds = requested.min(smallest).max(2);
    if folds < requested {
        log::warn!("smallest class has {smallest} samples; using {folds} folds instead of {requested}");
    }
    folds
}

/// Accuracy of k-NN over the given folds.
pub fn cross_validated_accuracy(m: &FeatureMatrix, fold_of: &[usize], folds: usize, k: usize) -> f64 {
    let mut correct = 0usize;
    for f in 0..folds {
        let train: Vec<usize> = (0..m.n()).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..m.n()).filter(|&i| fold_of[i] == f).collect();
        if train.is_empty() || test.is_empty() {
            continue;
        }
        let pred = knn::predict_rows(m, &train, m, &test, k, None);
        correct += pred
            .iter()
            .zip(&test)
            .filter(|(p, &i)| **p == m.labels()[i])
            .count();
    }
    correct as f64 / m.n() as f64
}

/// Scores every layer with the same folds and picks the best; on equal
/// accuracy the layer later in forward order wins.
pub fn knn_probe(
    layers: &BTreeMap<LayerId, FeatureMatrix>,
    config: &ProbeConfig,
) -> Result<ProbeReport, FeatureError> {
    let mats: Vec<&FeatureMatrix> = layers.values().collect();
    let first = *mats
        .first()
        .ok_or_else(|| FeatureError::Input("no layers to probe".into()))?;
    if mats.iter().any(|m| m.labels() != first.labels()) {
        return Err(FeatureError::Dimension(
            "layer matrices cover different samples".into(),
        ));
    }
    let labels = first.labels();
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(FeatureError::Input(format!(
            "probing needs at least 2 classes, found {}",
            distinct.len()
        )));
    }
    if config.k == 0 {
        return Err(FeatureError::Input("k must be positive".into()));
    }
    let folds = effective_folds(labels, config.folds);
    let canonical = canonical_order(&mats);
    let fold_of = stratified_folds(labels, &canonical, folds, config.seed);
    let scores: Vec<LayerScore> = layers
        .iter()
        .map(|(&layer, m)| LayerScore {
            layer,
            accuracy: cross_validated_accuracy(m, &fold_of, folds, config.k),
        })
        .collect();
    let best = scores
        .iter()
        .fold(None::<&LayerScore>, |acc, s| match acc {
            Some(b) if b.accuracy > s.accuracy => Some(b),
            _ => Some(s),
        })
        .expect("non-empty")
        .layer;
    Ok(ProbeReport {
        scores,
        best,
        folds,
        k: config.k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn layer_map(mats: Vec<(LayerId, FeatureMatrix)>) -> BTreeMap<LayerId, FeatureMatrix> {
        mats.into_iter().collect()
    }

    fn one_hot(labels: &[usize], classes: usize) -> FeatureMatrix {
        let mut data = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            data[i * classes + l] = 1.0;
        }
        FeatureMatrix::new(data, classes, labels.to_vec(), None).unwrap()
    }

    fn noise(labels: &[usize], dim: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..labels.len() * dim).map(|_| rng.random::<f32>()).collect();
        FeatureMatrix::new(data, dim, labels.to_vec(), None).unwrap()
    }

    #[test]
    fn separable_layer_wins() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let layers = layer_map(vec![
            (LayerId::Enc1, noise(&labels, 8, 1)),
            (LayerId::Bottleneck, one_hot(&labels, 3)),
        ]);
        let r = knn_probe(&layers, &ProbeConfig::default()).unwrap();
        assert_eq!(r.best, LayerId::Bottleneck);
        assert_eq!(r.scores[1].accuracy, 1.0);
        assert!(r.scores[0].accuracy < 0.8);
    }

    #[test]
    fn identical_layers_pick_the_last() {
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let m = noise(&labels, 4, 3);
        let layers = layer_map(LayerId::ALL.iter().map(|&l| (l, m.clone())).collect());
        let r = knn_probe(&layers, &ProbeConfig::default()).unwrap();
        assert!(r.scores.windows(2).all(|w| w[0].accuracy == w[1].accuracy));
        assert_eq!(r.best, LayerId::Dec2);
    }

    #[test]
    fn permutation_invariant() {
        let labels: Vec<usize> = (0..40).map(|i| (i * 7) % 3).collect();
        let a = noise(&labels, 5, 8);
        let b = noise(&labels, 3, 9);
        let r1 = knn_probe(&layer_map(vec![(LayerId::Enc1, a.clone()), (LayerId::Enc2, b.clone())]), &ProbeConfig::default()).unwrap();
        let mut perm: Vec<usize> = (0..40).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
        let r2 = knn_probe(
            &layer_map(vec![(LayerId::Enc1, a.subset(&perm)), (LayerId::Enc2, b.subset(&perm))]),
            &ProbeConfig::default(),
        )
        .unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn small_class_reduces_folds() {
        let labels = vec![0, 0, 0, 1, 1, 1, 1, 1, 1, 1];
        assert_eq!(effective_folds(&labels, 5), 3);
        let single = vec![0, 1, 1, 1];
        assert_eq!(effective_folds(&single, 5), 2);
        let layers = layer_map(vec![(LayerId::Enc1, one_hot(&labels, 2))]);
        assert_eq!(knn_probe(&layers, &ProbeConfig::default()).unwrap().folds, 3);
    }

    #[test]
    fn single_class_rejected() {
        let layers = layer_map(vec![(LayerId::Enc1, one_hot(&[0, 0, 0], 1))]);
        assert!(matches!(knn_probe(&layers, &ProbeConfig::default()), Err(FeatureError::Input(_))));
    }
}
