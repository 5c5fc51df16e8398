//! Brute-force k-nearest-neighbour voting.
//!
//! Euclidean distance accumulated in f64. Neighbours are ranked by
//! (distance, training index); a vote tie goes to the tied class whose
//! member appears earliest in that ranking.

use rayon::prelude::*;

use super::FeatureMatrix;

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn squared_distance_on(a: &[f32], b: &[f32], cols: &[usize]) -> f64 {
    cols.iter()
        .map(|&c| {
            let d = a[c] as f64 - b[c] as f64;
            d * d
        })
        .sum()
}

/// Training rows ranked by distance to `query`, truncated to `k`.
pub fn nearest(
    train: &FeatureMatrix,
    rows: &[usize],
    query: &[f32],
    k: usize,
    cols: Option<&[usize]>,
) -> Vec<(f64, usize)> {
    let mut ranked: Vec<(f64, usize)> = rows
        .iter()
        .map(|&i| {
            let d = match cols {
                Some(c) => squared_distance_on(train.row(i), query, c),
                None => squared_distance(train.row(i), query),
            };
            (d, i)
        })
        .collect();
    let k = k.min(ranked.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k, cmp);
        ranked.truncate(k);
    }
    ranked.sort_by(cmp);
    ranked
}

/// Majority label among ranked neighbours; ties go to the nearest.
pub fn vote(neighbours: &[(f64, usize)], labels: &[usize]) -> usize {
    let mut counts: Vec<(usize, usize, usize)> = Vec::new(); // (label, count, first rank)
    for (rank, &(_, i)) in neighbours.iter().enumerate() {
        match counts.iter_mut().find(|c| c.0 == labels[i]) {
            Some(c) => c.1 += 1,
            None => counts.push((labels[i], 1, rank)),
        }
    }
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
        .map(|c| c.0)
        .expect("at least one neighbour")
}

/// Predicts every row of `queries` from the `train_rows` of `train`.
/// `cols` restricts the distance to a column subset.
pub fn predict_rows(
    train: &FeatureMatrix,
    train_rows: &[usize],
    queries: &FeatureMatrix,
    query_rows: &[usize],
    k: usize,
    cols: Option<&[usize]>,
) -> Vec<usize> {
    query_rows
        .par_iter()
        .map(|&q| vote(&nearest(train, train_rows, queries.row(q), k, cols), train.labels()))
        .collect()
}

pub fn predict(train: &FeatureMatrix, queries: &FeatureMatrix, k: usize) -> Vec<usize> {
    let tr: Vec<usize> = (0..train.n()).collect();
    let qr: Vec<usize> = (0..queries.n()).collect();
    predict_rows(train, &tr, queries, &qr, k, None)
}
