//! Seeded k-means (k-means++ seeding, Lloyd refinement) and representative
//! sample selection.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureMatrix};

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

fn dist2(row: &[f32], c: &[f64]) -> f64 {
    row.iter()
        .zip(c)
        .map(|(&x, &m)| {
            let d = x as f64 - m;
            d * d
        })
        .sum()
}

fn nearest_centroid(row: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(row, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn as_f64(row: &[f32]) -> Vec<f64> {
    row.iter().map(|&v| v as f64).collect()
}

fn plus_plus_init(m: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = m.n();
    let mut centroids = vec![as_f64(m.row(rng.random_range(0..n)))];
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(m.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // every point already coincides with a centroid
            Err(_) => rng.random_range(0..n),
        };
        let c = as_f64(m.row(next));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(m.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Squared-Euclidean k-means. An empty cluster takes the point farthest
/// from its current centroid that has not already been used to reseed.
pub fn kmeans(m: &FeatureMatrix, k: usize, seed: u64) -> Result<KMeans, FeatureError> {
    let n = m.n();
    if k == 0 || k > n {
        return Err(FeatureError::Input(format!("cannot form {k} clusters from {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(m, k, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (j, d) = nearest_centroid(m.row(i), &centroids);
            assignment[i] = j;
            dists[i] = d;
        }
        let mut sums = vec![vec![0.0f64; m.dim()]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignment[i]] += 1;
            for (s, &v) in sums[assignment[i]].iter_mut().zip(m.row(i)) {
                *s += v as f64;
            }
        }
        let mut used = vec![false; n];
        let mut movement = 0.0f64;
        for j in 0..k {
            let next = if counts[j] == 0 {
                let far = (0..n)
                    .filter(|&i| !used[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= n leaves a point to reseed with");
                used[far] = true;
                counts[assignment[far]] = counts[assignment[far]].saturating_sub(1);
                assignment[far] = j;
                dists[far] = 0.0;
                as_f64(m.row(far))
            } else {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            };
            movement = movement.max(dist2_f64(&centroids[j], &next).sqrt());
            centroids[j] = next;
        }
        if movement < TOLERANCE {
            break;
        }
    }
    for i in 0..n {
        assignment[i] = nearest_centroid(m.row(i), &centroids).0;
    }
    Ok(KMeans {
        centroids,
        assignment,
        iterations,
    })
}

fn dist2_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepresentativeSet {
    /// Row indices into the source matrix, one per cluster.
    pub indices: Vec<usize>,
    pub k: usize,
    /// Cluster of every source row; `indices[j]` belongs to cluster `j`.
    pub assignment: Vec<usize>,
}

/// `round(ratio * n)` clusters; each contributes the member nearest its
/// centroid. If a class ends up unrepresented, the closest member of that
/// class to its own centroid replaces the representative of that cluster,
/// provided the displaced class keeps at least one representative.
pub fn select_representatives(
    m: &FeatureMatrix,
    ratio: f64,
    seed: u64,
) -> Result<RepresentativeSet, FeatureError> {
    let n = m.n();
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(FeatureError::Input(format!("ratio {ratio} outside (0, 1]")));
    }
    let k = (ratio * n as f64).round() as usize;
    if k == 0 {
        return Err(FeatureError::Input(format!(
            "{n} samples at ratio {ratio} select nothing"
        )));
    }
    let km = kmeans(m, k, seed)?;
    let mut assignment = km.assignment.clone();
    let mut reps: Vec<Option<usize>> = vec![None; k];
    for i in 0..n {
        let j = assignment[i];
        let d = dist2(m.row(i), &km.centroids[j]);
        if reps[j].is_none_or(|r| d < dist2(m.row(r), &km.centroids[j])) {
            reps[j] = Some(i);
        }
    }
    // coincident points can leave a cluster without members; it adopts the
    // nearest point that is not already someone's representative
    for j in 0..k {
        if reps[j].is_some() {
            continue;
        }
        let taken: Vec<usize> = reps.iter().flatten().copied().collect();
        let i = (0..n)
            .filter(|i| !taken.contains(i))
            .min_by(|&a, &b| {
                dist2(m.row(a), &km.centroids[j])
                    .total_cmp(&dist2(m.row(b), &km.centroids[j]))
                    .then(a.cmp(&b))
            })
            .expect("k <= n");
        assignment[i] = j;
        reps[j] = Some(i);
    }
    let mut reps: Vec<usize> = reps.into_iter().flatten().collect();
    let dist = |i: usize| dist2(m.row(i), &km.centroids[assignment[i]]);

    let labels = m.labels();
    let classes = m.num_classes();
    for class in 0..classes {
        let count = |reps: &[usize], c: usize| reps.iter().filter(|&&r| labels[r] == c).count();
        if count(&reps, class) > 0 || !labels.contains(&class) {
            continue;
        }
        let swap = (0..n)
            .filter(|&i| labels[i] == class)
            .filter(|&i| count(&reps, labels[reps[assignment[i]]]) > 1)
            .min_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
        match swap {
            Some(i) => reps[assignment[i]] = i,
            None => log::warn!("class {class} has no representative among {k} clusters"),
        }
    }
    Ok(RepresentativeSet {
        indices: reps,
        k,
        assignment,
    })
}
