//! Noise-prediction training with decoupled weight decay.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::params::{Grads, ParamStore};
use super::schedule::NoiseSchedule;
use super::tensor::{FeatureMap, Scalar};
use super::unet::{Architecture, Denoiser};
use super::DiffusionError;

/// Samples per gradient-accumulation chunk. Chunks are reduced in index order,
/// so results do not depend on the worker count.
pub(crate) const CHUNK: usize = 8;

/// Maps a byte image to `[-1, 1]`.
pub fn scale_image<T: Scalar>(pixels: &[u8], side: usize) -> FeatureMap<T> {
    FeatureMap::from_vec(
        1,
        side,
        side,
        pixels
            .iter()
            .map(|&b| T::of(b as f64 / 127.5 - 1.0))
            .collect(),
    )
}

pub fn standard_normal<T: Scalar, R: Rng>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Anything that predicts the added noise from `(x_t, t)`.
pub trait NoisePredictor<T: Scalar>: Sync {
    fn predict_noise(&self, x_t: &FeatureMap<T>, t: usize) -> Result<FeatureMap<T>, DiffusionError>;
}

impl<T: Scalar> NoisePredictor<T> for Denoiser<T> {
    fn predict_noise(&self, x_t: &FeatureMap<T>, t: usize) -> Result<FeatureMap<T>, DiffusionError> {
        self.predict(x_t, t)
    }
}

/// One corrupted training example.
#[derive(Debug, Clone)]
pub struct NoisedSample<T> {
    pub t: usize,
    pub eps: Vec<T>,
}

/// Draws `t ~ U{1..T}` then `eps ~ N(0, I)` for each image, in order.
pub fn draw_noise<T: Scalar, R: Rng>(
    rng: &mut R,
    n: usize,
    numel: usize,
    schedule: &NoiseSchedule,
) -> Vec<NoisedSample<T>> {
    (0..n)
        .map(|_| {
            let t = rng.random_range(1..=schedule.timesteps());
            NoisedSample {
                t,
                eps: standard_normal(rng, numel),
            }
        })
        .collect()
}

fn squared_error<T: Scalar>(eps: &[T], pred: &[T]) -> f64 {
    eps.iter()
        .zip(pred)
        .map(|(&e, &p)| {
            let d = e.as_f64() - p.as_f64();
            d * d
        })
        .sum()
}

/// Mean over the batch of `||eps - eps_theta(x_t, t)||^2` with fresh `t` and
/// `eps` drawn from `rng`.
pub fn training_loss<T: Scalar, N: NoisePredictor<T>, R: Rng>(
    net: &N,
    batch: &[FeatureMap<T>],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64, DiffusionError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let numel = batch[0].data.len();
    let noise = draw_noise::<T, _>(rng, batch.len(), numel, schedule);
    let mut total = 0.0;
    for (x0, s) in batch.iter().zip(&noise) {
        let xt = schedule.forward_sample(&x0.data, s.t, &s.eps)?;
        let xt = FeatureMap::from_vec(x0.c, x0.h, x0.w, xt);
        let pred = net.predict_noise(&xt, s.t)?;
        total += squared_error(&s.eps, &pred.data);
    }
    Ok(total / batch.len() as f64)
}

/// Loss and parameter gradients for a batch with fixed noise draws.
pub fn loss_and_grads<T: Scalar>(
    net: &Denoiser<T>,
    batch: &[&FeatureMap<T>],
    noise: &[NoisedSample<T>],
    schedule: &NoiseSchedule,
) -> Result<(f64, Grads<T>), DiffusionError> {
    assert_eq!(batch.len(), noise.len());
    let scale = T::of(-2.0 / batch.len() as f64);
    let work: Vec<_> = batch.iter().zip(noise).collect();
    let partials: Vec<Result<(f64, Grads<T>), DiffusionError>> = work
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Grads::zeros_like(net.params());
            let mut loss = 0.0;
            for (x0, s) in chunk {
                let xt = schedule.forward_sample(&x0.data, s.t, &s.eps)?;
                let xt = FeatureMap::from_vec(x0.c, x0.h, x0.w, xt);
                let (pred, trace) = net.forward(&xt, s.t)?;
                loss += squared_error(&s.eps, &pred.data);
                let dout = FeatureMap::from_vec(
                    pred.c,
                    pred.h,
                    pred.w,
                    s.eps
                        .iter()
                        .zip(&pred.data)
                        .map(|(&e, &p)| scale * (e - p))
                        .collect(),
                );
                net.backward(&trace, &dout, &mut g);
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Grads::zeros_like(net.params());
    for part in partials {
        let (l, g) = part?;
        total += l;
        grads.add_assign(&g);
    }
    Ok((total / batch.len() as f64, grads))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(params: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates every tensor whose name passes `trainable`; others are left
    /// untouched.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &Grads<T>,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            if !trainable(&tensor.name) {
                continue;
            }
            let g = grads.by_index(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..tensor.data.len() {
                let gj = g[j].as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let theta = tensor.data[j].as_f64();
                let update = mhat / (vhat.sqrt() + self.eps) + self.weight_decay * theta;
                tensor.data[j] = T::of(theta - self.lr * update);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub timesteps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            timesteps: 500,
            lr: 1e-3,
            weight_decay: 0.05,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.batch_size == 0 || self.timesteps == 0 {
            return Err(DiffusionError::Config(
                "batch size and timesteps must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(DiffusionError::Config(
                "learning rate and weight decay must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Trains a fresh denoiser on byte images. `on_checkpoint` receives the
/// intermediate checkpoints requested by `checkpoint_every`.
pub fn train(
    images: &[Vec<u8>],
    arch: Architecture,
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<(), DiffusionError>,
) -> Result<(Checkpoint, TrainReport), DiffusionError> {
    config.validate()?;
    if images.is_empty() {
        return Err(DiffusionError::Config("training set is empty".into()));
    }
    let side = arch.image_size;
    if let Some(bad) = images.iter().find(|im| im.len() != side * side) {
        return Err(DiffusionError::Shape(format!(
            "image with {} bytes, expected {}",
            bad.len(),
            side * side
        )));
    }
    let schedule = NoiseSchedule::cosine(config.timesteps)?;
    let mut net = Denoiser::<f32>::new(arch, config.seed)?;
    let data: Vec<FeatureMap<f32>> = images.iter().map(|im| scale_image(im, side)).collect();
    let mut opt = AdamW::new(net.params(), config.lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00_0000);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(config.epochs),
        steps: 0,
    };
    info!(
        "training denoiser: {} images, {} params, {} epochs",
        data.len(),
        net.numel(),
        config.epochs
    );
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&FeatureMap<f32>> = idx.iter().map(|&i| &data[i]).collect();
            let noise = draw_noise(&mut rng, batch.len(), side * side, &schedule);
            let (loss, grads) = loss_and_grads(&net, &batch, &noise, &schedule)?;
            if !loss.is_finite() {
                return Err(DiffusionError::NonFinite {
                    step: report.steps,
                    lr: config.lr,
                    grad_norm: grads.l2_norm(),
                });
            }
            opt.step(net.params_mut(), &grads, |_| true);
            report.steps += 1;
            epoch_loss += loss;
            batches += 1;
            debug!("step {} loss {loss:.4}", report.steps);
        }
        let mean = epoch_loss / batches as f64;
        info!("epoch {}/{} mean loss {mean:.4}", epoch + 1, config.epochs);
        report.epoch_losses.push(mean);
        if let Some(every) = config.checkpoint_every {
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < config.epochs {
                on_checkpoint(&Checkpoint::new(
                    schedule.clone(),
                    net.clone(),
                    report.steps,
                    config.seed,
                ))?;
            }
        }
    }
    Ok((
        Checkpoint::new(schedule, net, report.steps, config.seed),
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns the exact noise that was added, keyed by the corrupted input.
    struct Oracle {
        lookup: Vec<(Vec<f64>, Vec<f64>)>,
    }

    impl NoisePredictor<f64> for Oracle {
        fn predict_noise(
            &self,
            x_t: &FeatureMap<f64>,
            _t: usize,
        ) -> Result<FeatureMap<f64>, DiffusionError> {
            let eps = self
                .lookup
                .iter()
                .find(|(x, _)| *x == x_t.data)
                .map(|(_, e)| e.clone())
                .unwrap();
            Ok(FeatureMap::from_vec(x_t.c, x_t.h, x_t.w, eps))
        }
    }

    struct Zero;
    impl NoisePredictor<f64> for Zero {
        fn predict_noise(
            &self,
            x_t: &FeatureMap<f64>,
            _t: usize,
        ) -> Result<FeatureMap<f64>, DiffusionError> {
            Ok(FeatureMap::zeros(x_t.c, x_t.h, x_t.w))
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let schedule = NoiseSchedule::cosine(50).unwrap();
        let batch: Vec<FeatureMap<f64>> = (0..3)
            .map(|i| FeatureMap::from_vec(1, 2, 2, vec![i as f64 * 0.1; 4]))
            .collect();
        // replay the same draws to know the noise for each corrupted input
        let mut probe_rng = ChaCha8Rng::seed_from_u64(9);
        let noise = draw_noise::<f64, _>(&mut probe_rng, 3, 4, &schedule);
        let lookup = batch
            .iter()
            .zip(&noise)
            .map(|(x, s)| (schedule.forward_sample(&x.data, s.t, &s.eps).unwrap(), s.eps.clone()))
            .collect();
        let oracle = Oracle { lookup };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let loss = training_loss(&oracle, &batch, &schedule, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn zero_predictor_loss_is_noise_energy() {
        // E||eps||^2 = numel; the sample mean over many draws has standard
        // error sqrt(2 numel / draws).
        let schedule = NoiseSchedule::cosine(100).unwrap();
        let numel = 16;
        let batch: Vec<FeatureMap<f64>> = (0..4000)
            .map(|_| FeatureMap::from_vec(1, 4, 4, vec![0.3; numel]))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let loss = training_loss(&Zero, &batch, &schedule, &mut rng).unwrap();
        let se = (2.0 * numel as f64 / batch.len() as f64).sqrt();
        assert!((loss - numel as f64).abs() < 3.0 * se, "loss {loss}");
        assert!(loss >= 0.0);
    }

    #[test]
    fn adamw_with_zero_lr_is_identity() {
        let net = Denoiser::<f32>::new(
            Architecture {
                widths: [4, 4, 4],
                embed_dim: 4,
                ..Architecture::default()
            },
            1,
        )
        .unwrap();
        let mut params = net.params().clone();
        let mut grads = Grads::zeros_like(&params);
        grads.add_assign(&Grads::zeros_like(&params));
        let mut opt = AdamW::new(&params, 0.0, 0.05);
        opt.step(&mut params, &grads, |_| true);
        assert_eq!(&params, net.params());
    }

    #[test]
    fn empty_dataset_rejected() {
        let err = train(&[], Architecture::default(), &TrainConfig::default(), |_| Ok(()));
        assert!(matches!(err, Err(DiffusionError::Config(_))));
    }

    #[test]
    fn zero_epochs_returns_initial_net() {
        let arch = Architecture {
            widths: [4, 4, 8],
            embed_dim: 8,
            ..Architecture::default()
        };
        let cfg = TrainConfig {
            epochs: 0,
            seed: 11,
            ..TrainConfig::default()
        };
        let images = vec![vec![0u8; 784]; 3];
        let (ckpt, report) = train(&images, arch, &cfg, |_| Ok(())).unwrap();
        assert_eq!(report.steps, 0);
        assert_eq!(ckpt.step, 0);
        let fresh = Denoiser::<f32>::new(arch, 11).unwrap();
        assert_eq!(ckpt.net.params(), fresh.params());
    }
}
