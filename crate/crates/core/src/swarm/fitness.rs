//! Robust subset-error objective: worst subset error plus a variance
//! penalty, optionally plus a feature-count penalty.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SwarmError;
use crate::features::{kmeans, knn, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    /// Error rate on each evaluation subset.
    pub errors: Vec<f64>,
    pub max: f64,
    /// Population variance of `errors`.
    pub variance: f64,
    pub selected: usize,
    pub value: f64,
}

impl FitnessReport {
    /// One minus the mean subset error.
    pub fn accuracy(&self) -> f64 {
        if self.errors.is_empty() {
            return 0.0;
        }
        1.0 - self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }
}

/// `max(errors) + lambda * popvar(errors) + mu * selected / dim`.
pub fn fitness_value(errors: &[f64], lambda: f64, mu: f64, selected: usize, dim: usize) -> FitnessReport {
    let n = errors.len() as f64;
    let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = errors.iter().sum::<f64>() / n;
    let variance = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let penalty = if dim == 0 { 0.0 } else { mu * selected as f64 / dim as f64 };
    FitnessReport {
        errors: errors.to_vec(),
        max,
        variance,
        selected,
        value: max + lambda * variance + penalty,
    }
}

/// Anything that scores a feature mask; lower is better.
pub trait Fitness: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, mask: &[bool]) -> FitnessReport;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitnessSpec {
    /// Reference rows the surrogate classifier votes with.
    pub train: FeatureMatrix,
    pub subsets: Vec<FeatureMatrix>,
    pub lambda: f64,
    pub mu: f64,
    pub k: usize,
}

impl FitnessSpec {
    pub fn new(
        train: FeatureMatrix,
        subsets: Vec<FeatureMatrix>,
        lambda: f64,
        mu: f64,
    ) -> Result<Self, SwarmError> {
        if subsets.is_empty() || subsets.iter().any(|s| s.n() == 0) {
            return Err(SwarmError::Config("every evaluation subset must be non-empty".into()));
        }
        if train.n() == 0 {
            return Err(SwarmError::Config("fitness training split is empty".into()));
        }
        if subsets.iter().any(|s| s.dim() != train.dim()) {
            return Err(SwarmError::Config("subset and training widths differ".into()));
        }
        if !(lambda >= 0.0) || !(mu >= 0.0) {
            return Err(SwarmError::Config(format!(
                "lambda ({lambda}) and mu ({mu}) must be non-negative"
            )));
        }
        Ok(Self {
            train,
            subsets,
            lambda,
            mu,
            k: 5,
        })
    }
}

pub fn eval_fitness(mask: &[bool], spec: &FitnessSpec) -> FitnessReport {
    let dim = spec.train.dim();
    assert_eq!(mask.len(), dim, "mask width");
    let cols: Vec<usize> = (0..dim).filter(|&d| mask[d]).collect();
    if cols.is_empty() {
        let errors = vec![1.0; spec.subsets.len()];
        return FitnessReport {
            max: 1.0,
            variance: 0.0,
            selected: 0,
            value: 1.0 + spec.lambda,
            errors,
        };
    }
    let train_rows: Vec<usize> = (0..spec.train.n()).collect();
    let errors: Vec<f64> = spec
        .subsets
        .iter()
        .map(|s| {
            let q: Vec<usize> = (0..s.n()).collect();
            let pred = knn::predict_rows(&spec.train, &train_rows, s, &q, spec.k, Some(&cols));
            let wrong = pred.iter().zip(s.labels()).filter(|(p, y)| p != y).count();
            wrong as f64 / s.n() as f64
        })
        .collect();
    fitness_value(&errors, spec.lambda, spec.mu, cols.len(), dim)
}

impl Fitness for FitnessSpec {
    fn dim(&self) -> usize {
        self.train.dim()
    }

    fn evaluate(&self, mask: &[bool]) -> FitnessReport {
        eval_fitness(mask, self)
    }
}

/// Row indices of the evaluation subsets and the surrogate training split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetPlan {
    pub subsets: Vec<Vec<usize>>,
    pub train: Vec<usize>,
}

impl SubsetPlan {
    pub fn into_spec(&self, m: &FeatureMatrix, lambda: f64, mu: f64) -> Result<FitnessSpec, SwarmError> {
        FitnessSpec::new(
            m.subset(&self.train),
            self.subsets.iter().map(|s| m.subset(s)).collect(),
            lambda,
            mu,
        )
    }
}

/// Clusters the rows into `n_subsets` groups; subset `i` is the (up to)
/// `ceil(ratio * n)` members of cluster `i` closest to its centroid. The
/// surrogate training split is a stratified `train_ratio` sample of the
/// remaining rows.
pub fn build_subsets(
    m: &FeatureMatrix,
    n_subsets: usize,
    ratio: f64,
    train_ratio: f64,
    seed: u64,
) -> Result<SubsetPlan, SwarmError> {
    let n = m.n();
    if n_subsets == 0 || !(ratio > 0.0) || !(train_ratio > 0.0) {
        return Err(SwarmError::Config(
            "subset count and ratios must be positive".into(),
        ));
    }
    let per = (ratio * n as f64).ceil() as usize;
    let km = kmeans(m, n_subsets, seed)?;
    let dist = |i: usize, j: usize| -> f64 {
        m.row(i)
            .iter()
            .zip(&km.centroids[j])
            .map(|(&x, c)| (x as f64 - c) * (x as f64 - c))
            .sum()
    };
    let mut subsets = Vec::with_capacity(n_subsets);
    for j in 0..n_subsets {
        let mut members: Vec<usize> = (0..n).filter(|&i| km.assignment[i] == j).collect();
        members.sort_by(|&a, &b| dist(a, j).total_cmp(&dist(b, j)).then(a.cmp(&b)));
        members.truncate(per);
        members.sort_unstable();
        subsets.push(members);
    }
    if subsets.iter().any(Vec::is_empty) {
        return Err(SwarmError::Config("a cluster produced an empty subset".into()));
    }
    let mut used = vec![false; n];
    for s in &subsets {
        for &i in s {
            used[i] = true;
        }
    }
    let labels = m.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7375_6273_6574);
    let mut train = Vec::new();
    for class in 0..m.num_classes() {
        let total = labels.iter().filter(|&&l| l == class).count();
        let want = (train_ratio * total as f64).round() as usize;
        let mut free: Vec<usize> = (0..n).filter(|&i| labels[i] == class && !used[i]).collect();
        if free.len() < want {
            return Err(SwarmError::Config(format!(
                "class {class} has {} rows left after subsetting, {want} needed for training",
                free.len()
            )));
        }
        free.shuffle(&mut rng);
        train.extend_from_slice(&free[..want]);
    }
    train.sort_unstable();
    if train.is_empty() {
        return Err(SwarmError::Config("fitness training split is empty".into()));
    }
    Ok(SubsetPlan { subsets, train })
}
