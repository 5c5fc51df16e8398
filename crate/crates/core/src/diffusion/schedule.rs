//! Cosine noise schedule and the closed-form forward corruption.

use serde::{Deserialize, Serialize};

use super::tensor::Scalar;
use super::DiffusionError;

pub const COSINE_OFFSET: f64 = 0.008;
pub const BETA_MIN: f64 = 1e-5;
pub const BETA_MAX: f64 = 0.999;

/// Per-timestep corruption strengths.
///
/// Timesteps are 1-based; index 0 of `alpha_bars` is the clean signal
/// (`alpha_bar_0 = 1`). `betas[t - 1]` holds `beta_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    timesteps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// `f(t) = cos^2(((t/T) + s) / (1 + s) * pi/2)`.
pub fn cosine_f(t: f64, timesteps: f64) -> f64 {
    let arg = ((t / timesteps) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    arg.cos().powi(2)
}

impl NoiseSchedule {
    /// Builds the cosine schedule. Betas come from consecutive ratios of the
    /// closed form and are clipped to `[BETA_MIN, BETA_MAX]`; the cumulative
    /// products are then recomputed from the clipped betas so that
    /// `alpha_bar_t == alpha_bar_{t-1} * alpha_t` holds exactly.
    pub fn cosine(timesteps: usize) -> Result<Self, DiffusionError> {
        if timesteps == 0 {
            return Err(DiffusionError::Domain("timestep count must be >= 1".into()));
        }
        let tf = timesteps as f64;
        let f0 = cosine_f(0.0, tf);
        let closed = |t: usize| cosine_f(t as f64, tf) / f0;
        let betas: Vec<f64> = (1..=timesteps)
            .map(|t| (1.0 - closed(t) / closed(t - 1)).clamp(BETA_MIN, BETA_MAX))
            .collect();
        Ok(Self::from_betas(betas))
    }

    pub(crate) fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        Self {
            timesteps: betas.len(),
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.timesteps {
            return Err(DiffusionError::Domain(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps
            )));
        }
        Ok(())
    }

    /// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn forward_sample<T: Scalar>(
        &self,
        x0: &[T],
        t: usize,
        eps: &[T],
    ) -> Result<Vec<T>, DiffusionError> {
        self.check_timestep(t)?;
        if x0.len() != eps.len() {
            return Err(DiffusionError::Shape(format!(
                "noise has {} elements, image has {}",
                eps.len(),
                x0.len()
            )));
        }
        let ab = self.alpha_bars[t];
        let (sa, sn) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
        Ok(x0.iter().zip(eps).map(|(&x, &e)| sa * x + sn * e).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_timesteps_rejected() {
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn alpha_bar_zero_is_one_and_strictly_decreasing() {
        let s = NoiseSchedule::cosine(500).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=500 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "t={t}");
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            assert!((BETA_MIN..=BETA_MAX).contains(&s.beta(t)));
        }
        assert!(s.alpha_bar(500) < s.alpha_bar(1));
    }

    #[test]
    fn zero_noise_scales_signal() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let x0 = [0.5f64, -1.0, 0.25];
        let xt = s.forward_sample(&x0, 10, &[0.0; 3]).unwrap();
        let k = s.alpha_bar(10).sqrt();
        for (a, b) in xt.iter().zip(&x0) {
            assert_eq!(*a, k * b);
        }
    }

    #[test]
    fn out_of_range_timestep_is_domain_error() {
        let s = NoiseSchedule::cosine(10).unwrap();
        assert!(matches!(
            s.forward_sample(&[0.0f32], 0, &[0.0]),
            Err(DiffusionError::Domain(_))
        ));
        assert!(s.forward_sample(&[0.0f32], 11, &[0.0]).is_err());
        assert!(s.forward_sample(&[0.0f32], 10, &[0.0]).is_ok());
    }
}
