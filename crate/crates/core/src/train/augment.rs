use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor2D};

/// Knobs of the stochastic view generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub gaussian_noise_sigma: f64,
    /// Probability of zeroing each coordinate independently.
    pub mask_prob: f64,
    /// Views are scaled by a factor uniform in `[1 − jitter, 1 + jitter]`.
    pub scale_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gaussian_noise_sigma: 0.3,
            mask_prob: 0.2,
            scale_jitter: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_noise_sigma >= 0.0 && self.gaussian_noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gaussian_noise_sigma must be >= 0, got {}",
                self.gaussian_noise_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::InvalidConfig(format!("mask_prob must lie in [0, 1), got {}", self.mask_prob)));
        }
        if !(self.scale_jitter >= 0.0 && self.scale_jitter.is_finite()) {
            return Err(Error::InvalidConfig(format!("scale_jitter must be >= 0, got {}", self.scale_jitter)));
        }
        Ok(())
    }
}

/// One view: `scale · (mask ⊙ x + σ·noise)`. Knobs set to zero consume no randomness.
fn view_into(x: &[f64], out: &mut [f64], rng: &mut Rng, cfg: &AugmentConfig) {
    let scale = if cfg.scale_jitter > 0.0 {
        rng.uniform_range(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter)
    } else {
        1.0
    };
    for (o, &v) in out.iter_mut().zip(x) {
        let kept = if cfg.mask_prob > 0.0 && rng.bernoulli(cfg.mask_prob) { 0.0 } else { v };
        let noise = if cfg.gaussian_noise_sigma > 0.0 {
            cfg.gaussian_noise_sigma * rng.normal()
        } else {
            0.0
        };
        *o = scale * (kept + noise);
    }
}

/// Two independent views of one sample.
pub fn augment(x: &[f64], rng: &mut Rng, cfg: &AugmentConfig) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![0.0; x.len()];
    let mut b = vec![0.0; x.len()];
    view_into(x, &mut a, rng, cfg);
    view_into(x, &mut b, rng, cfg);
    (a, b)
}

/// [`augment`] applied row by row.
pub fn augment_batch(batch: &Tensor2D, rng: &mut Rng, cfg: &AugmentConfig) -> (Tensor2D, Tensor2D) {
    let (rows, cols) = batch.shape();
    let mut a = Tensor2D::zeros(rows, cols);
    let mut b = Tensor2D::zeros(rows, cols);
    for r in 0..rows {
        view_into(batch.row(r), a.row_mut(r), rng, cfg);
        view_into(batch.row(r), b.row_mut(r), rng, cfg);
    }
    (a, b)
}
