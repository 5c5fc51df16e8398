//! Harvesting pooled block activations at a fixed timestep.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::schedule::NoiseSchedule;
use super::tensor::{FeatureMap, Scalar};
use super::train::{scale_image, standard_normal};
use super::unet::{Denoiser, LayerId, Trace};
use super::DiffusionError;
use crate::features::FeatureMatrix;

/// Per-image noise stream: image `index` always sees the same draw for a
/// given run seed, whichever layer is being read.
pub fn extraction_noise<T: Scalar>(seed: u64, index: usize, numel: usize) -> Vec<T> {
    let stream = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    standard_normal(&mut rng, numel)
}

/// Corrupts an image to `x_{t_ex}` with the given noise and runs the net.
pub fn noised_trace<T: Scalar>(
    net: &Denoiser<T>,
    schedule: &NoiseSchedule,
    pixels: &[u8],
    t_ex: usize,
    eps: &[T],
) -> Result<Trace<T>, DiffusionError> {
    let side = net.arch().image_size;
    if pixels.len() != side * side {
        return Err(DiffusionError::Shape(format!(
            "image with {} bytes, expected {}",
            pixels.len(),
            side * side
        )));
    }
    let x0 = scale_image::<T>(pixels, side);
    let xt = schedule.forward_sample(&x0.data, t_ex, eps)?;
    let (_, trace) = net.forward(&FeatureMap::from_vec(1, side, side, xt), t_ex)?;
    Ok(trace)
}

/// Pooled features of every layer in one pass per image.
pub fn extract_all_layers(
    net: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    images: &[Vec<u8>],
    labels: &[usize],
    t_ex: usize,
    seed: u64,
) -> Result<BTreeMap<LayerId, FeatureMatrix>, DiffusionError> {
    schedule.check_timestep(t_ex)?;
    if images.len() != labels.len() {
        return Err(DiffusionError::Shape("image and label counts differ".into()));
    }
    let side = net.arch().image_size;
    let rows: Vec<Vec<Vec<f32>>> = images
        .par_iter()
        .enumerate()
        .map(|(i, px)| {
            let eps = extraction_noise::<f32>(seed, i, side * side);
            let trace = noised_trace(net, schedule, px, t_ex, &eps)?;
            Ok(LayerId::ALL.iter().map(|&l| trace.pooled(l)).collect())
        })
        .collect::<Result<_, DiffusionError>>()?;
    let mut out = BTreeMap::new();
    for layer in LayerId::ALL {
        let dim = net.arch().layer_dim(layer);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in &rows {
            data.extend_from_slice(&r[layer.index()]);
        }
        out.insert(
            layer,
            FeatureMatrix::new(data, dim, labels.to_vec(), Some(layer))
                .expect("consistent dimensions"),
        );
    }
    Ok(out)
}

/// Pooled features of a single layer.
pub fn extract_layer_features(
    net: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    images: &[Vec<u8>],
    labels: &[usize],
    t_ex: usize,
    layer: LayerId,
    seed: u64,
) -> Result<FeatureMatrix, DiffusionError> {
    let mut all = extract_all_layers(net, schedule, images, labels, t_ex, seed)?;
    Ok(all.remove(&layer).expect("every layer extracted"))
}

/// Ancestral sampling from pure noise. Only meant for eyeballing what the
/// model learned; classification never calls it.
pub fn debug_sample(
    net: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<u8>>, DiffusionError> {
    let side = net.arch().image_size;
    let numel = side * side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut x: Vec<f32> = standard_normal(&mut rng, numel);
        for t in (1..=schedule.timesteps()).rev() {
            let eps_hat = net.predict(&FeatureMap::from_vec(1, side, side, x.clone()), t)?;
            let alpha = schedule.alpha(t);
            let ab = schedule.alpha_bar(t);
            let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
            let sigma = schedule.beta(t).sqrt();
            let z: Vec<f32> = if t > 1 {
                standard_normal(&mut rng, numel)
            } else {
                vec![0.0; numel]
            };
            for j in 0..numel {
                let mean = (x[j] as f64 - coef * eps_hat.data[j] as f64) / alpha.sqrt();
                x[j] = (mean + sigma * z[j] as f64) as f32;
            }
        }
        out.push(
            x.iter()
                .map(|&v| ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
                .collect(),
        );
    }
    Ok(out)
}
