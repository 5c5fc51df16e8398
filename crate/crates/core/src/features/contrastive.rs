//! Supervised contrastive (InfoNCE-style) objective and fine-tuning of a
//! single denoiser block.
//!
//! For anchor `i` with same-label positives `P(i)` and similarities
//! `s_ij = z_i . z_j / tau` over unit rows `z`:
//!
//! `l_i = -log( sum_{p in P(i)} exp(s_ip) / sum_{j != i} exp(s_ij) )`
//!
//! and the loss is the mean of `l_i` over anchors that have a positive.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FeatureError;
use crate::diffusion::extract::{extraction_noise, noised_trace};
use crate::diffusion::params::Grads;
use crate::diffusion::train::CHUNK;
use crate::diffusion::{AdamW, Checkpoint, Denoiser, FeatureMap, LayerId, NoiseSchedule, Scalar};

pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    /// d loss / d z, row by row.
    pub grad: Vec<Vec<f64>>,
    pub anchors: usize,
    pub skipped: usize,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Loss and gradient with respect to the (already normalized) rows.
pub fn infonce(z: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<InfoNce, FeatureError> {
    if z.len() != labels.len() {
        return Err(FeatureError::Dimension(format!(
            "{} rows, {} labels",
            z.len(),
            labels.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(FeatureError::Input(format!("temperature {tau} must be positive")));
    }
    let n = z.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let s: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| dot(&z[i], &z[j]) / tau).collect())
        .collect();
    let mut grad = vec![vec![0.0; z.first().map_or(0, Vec::len)]; n];
    // coefficient of s_ij in the summed loss
    let mut coef = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let others = (0..n).filter(|&j| j != i);
        let pos: Vec<usize> = others.clone().filter(|&j| labels[j] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let lse_all = log_sum_exp(others.clone().map(|j| s[i][j]));
        let lse_pos = log_sum_exp(pos.iter().map(|&j| s[i][j]));
        total += lse_all - lse_pos;
        for j in others {
            coef[i][j] += (s[i][j] - lse_all).exp();
        }
        for &p in &pos {
            coef[i][p] -= (s[i][p] - lse_pos).exp();
        }
    }
    let skipped = n - anchors;
    if skipped > 0 {
        log::warn!("{skipped} of {n} anchors have no positive in the batch and are excluded");
    }
    if anchors == 0 {
        return Ok(InfoNce {
            loss: 0.0,
            grad,
            anchors,
            skipped,
        });
    }
    let scale = 1.0 / (anchors as f64 * tau);
    for i in 0..n {
        for j in 0..n {
            let c = coef[i][j] * scale;
            if c == 0.0 {
                continue;
            }
            for d in 0..grad[i].len() {
                grad[i][d] += c * z[j][d];
                grad[j][d] += c * z[i][d];
            }
        }
    }
    Ok(InfoNce {
        loss: total / anchors as f64,
        grad,
        anchors,
        skipped,
    })
}

pub fn infonce_loss(z: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<f64, FeatureError> {
    infonce(z, labels, tau).map(|r| r.loss)
}

/// Returns the unit row and the norm it was divided by.
pub fn normalize(h: &[f64]) -> (Vec<f64>, f64) {
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
    (h.iter().map(|v| v / norm).collect(), norm)
}

/// Pulls a gradient on `z = h / |h|` back to `h`.
pub fn normalize_backward(z: &[f64], norm: f64, dz: &[f64]) -> Vec<f64> {
    let zd: f64 = z.iter().zip(dz).map(|(a, b)| a * b).sum();
    z.iter().zip(dz).map(|(&zi, &g)| (g - zi * zd) / norm).collect()
}

/// Mean cosine similarity over all same-class pairs.
pub fn mean_intra_class_cosine(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let unit: Vec<Vec<f64>> = rows.iter().map(|r| normalize(r).0).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if labels[i] == labels[j] {
                sum += unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub t_ex: usize,
    /// Shuffles the representative set between epochs.
    pub seed: u64,
    /// Seed of the per-sample extraction noise.
    pub noise_seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-6,
            weight_decay: 1e-2,
            temperature: 0.07,
            batch_size: 64,
            t_ex: 50,
            seed: 0,
            noise_seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.batch_size == 0 {
            return Err(FeatureError::Input("batch size must be positive".into()));
        }
        if !(self.temperature > 0.0) || !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(FeatureError::Input(
                "temperature must be positive; lr and weight decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub layer: LayerId,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// One fine-tuning sample: pixels, label and the index that keys its
/// extraction noise.
#[derive(Debug, Clone, Copy)]
pub struct TuneSample<'a> {
    pub pixels: &'a [u8],
    pub label: usize,
    pub noise_index: usize,
}

/// Contrastive loss of a batch and its gradient with respect to the
/// parameters of `layer` only (every other entry of the result stays zero).
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss_and_grads<T: Scalar>(
    net: &Denoiser<T>,
    schedule: &NoiseSchedule,
    batch: &[TuneSample<'_>],
    layer: LayerId,
    t_ex: usize,
    noise_seed: u64,
    tau: f64,
) -> Result<(f64, Grads<T>), FeatureError> {
    let side = net.arch().image_size;
    let traces = batch
        .par_iter()
        .map(|s| {
            let eps = extraction_noise::<T>(noise_seed, s.noise_index, side * side);
            noised_trace(net, schedule, s.pixels, t_ex, &eps)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pooled: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| t.pooled(layer).iter().map(|v| v.as_f64()).collect())
        .collect();
    let (unit, norms): (Vec<Vec<f64>>, Vec<f64>) = pooled.iter().map(|h| normalize(h)).unzip();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let nce = infonce(&unit, &labels, tau)?;

    let work: Vec<usize> = (0..batch.len()).collect();
    let partials: Vec<Grads<T>> = work
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Grads::zeros_like(net.params());
            for &i in chunk {
                let dh = normalize_backward(&unit[i], norms[i], &nce.grad[i]);
                let out = traces[i].block_output(layer);
                let plane = out.plane();
                let mut data = Vec::with_capacity(out.data.len());
                for d in &dh {
                    data.extend(std::iter::repeat_n(T::of(d / plane as f64), plane));
                }
                let dout = FeatureMap::from_vec(out.c, out.h, out.w, data);
                net.backward_block(layer, &traces[i], &dout, &mut g);
            }
            g
        })
        .collect();
    let mut grads = Grads::zeros_like(net.params());
    for g in &partials {
        grads.add_assign(g);
    }
    Ok((nce.loss, grads))
}

/// Fine-tunes only the parameters of `layer`; every other tensor is carried
/// over bit for bit.
pub fn contrastive_finetune(
    checkpoint: &Checkpoint,
    samples: &[TuneSample<'_>],
    layer: LayerId,
    config: &FinetuneConfig,
) -> Result<(Checkpoint, FinetuneReport), FeatureError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(FeatureError::Input("no samples to fine-tune on".into()));
    }
    checkpoint.schedule.check_timestep(config.t_ex)?;
    let mut net = checkpoint.net.clone();
    let prefix = layer.param_prefix();
    let mut opt = AdamW::new(net.params(), config.lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = FinetuneReport {
        layer,
        epoch_losses: Vec::with_capacity(config.epochs),
        steps: 0,
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TuneSample<'_>> = chunk.iter().map(|&i| samples[i]).collect();
            let (loss, grads) = contrastive_loss_and_grads(
                &net,
                &checkpoint.schedule,
                &batch,
                layer,
                config.t_ex,
                config.noise_seed,
                config.temperature,
            )?;
            if !loss.is_finite() {
                return Err(FeatureError::Input(format!(
                    "contrastive loss became {loss} in epoch {epoch}"
                )));
            }
            opt.step(net.params_mut(), &grads, |name| name.starts_with(&prefix));
            loss_sum += loss;
            batches += 1;
            report.steps += 1;
        }
        let mean = loss_sum / batches as f64;
        log::info!("finetune {layer} epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    let tuned = Checkpoint::new(
        checkpoint.schedule.clone(),
        net,
        checkpoint.step,
        checkpoint.seed,
    );
    Ok((tuned, report))
}
