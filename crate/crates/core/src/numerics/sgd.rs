use super::tensor::Tensor2D;
use crate::error::{shape_err, Error, Result};

/// Hyperparameters for momentum SGD with coupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        let cfg = Self {
            learning_rate,
            momentum,
            weight_decay,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is permitted so callers can freeze a model while still reporting losses.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be a finite value >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Optimizer state: one velocity buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: Vec<Tensor2D>,
}

impl SgdState {
    /// Zero velocity buffers shaped like `params`.
    pub fn new<'a>(config: SgdConfig, params: impl IntoIterator<Item = &'a Tensor2D>) -> Self {
        Self {
            config,
            velocity: params
                .into_iter()
                .map(|p| Tensor2D::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor2D] {
        &self.velocity
    }

    /// Updates a single parameter `index` in place.
    ///
    /// `v ← μ·v + g + λ·θ`, then `θ ← θ − lr·v`.
    pub fn step_one(&mut self, index: usize, param: &mut Tensor2D, grad: &Tensor2D) -> Result<()> {
        let v = self
            .velocity
            .get_mut(index)
            .ok_or_else(|| shape_err("sgd_step", format!("no velocity buffer for parameter {index}")))?;
        if !param.same_shape(grad) || !param.same_shape(v) {
            return Err(shape_err(
                "sgd_step",
                format!(
                    "parameter {index}: param {:?}, grad {:?}, velocity {:?}",
                    param.shape(),
                    grad.shape(),
                    v.shape()
                ),
            ));
        }
        let SgdConfig {
            learning_rate: lr,
            momentum,
            weight_decay,
        } = self.config;
        for ((p, g), vel) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(v.data_mut())
        {
            *vel = momentum * *vel + g + weight_decay * *p;
            *p -= lr * *vel;
        }
        Ok(())
    }
}

/// One optimizer step over every parameter.
pub fn sgd_step(params: &mut [Tensor2D], grads: &[Tensor2D], state: &mut SgdState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(shape_err(
            "sgd_step",
            format!(
                "{} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                state.velocity.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.step_one(i, p, g)?;
    }
    Ok(())
}
