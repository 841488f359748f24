use std::f64::consts::PI;

use super::tensor::ParamSet;
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

/// SGD with momentum and decoupled-per-parameter weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub epoch: usize,
    pub total_epochs: usize,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, base_lr: f64, total_epochs: usize) -> Self {
        Self {
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            base_lr,
            epoch: 0,
            total_epochs,
            velocity: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    pub fn with_momentum(mut self, momentum: f64, weight_decay: f64) -> Self {
        self.momentum = momentum;
        self.weight_decay = weight_decay;
        self
    }

    pub fn velocity(&self, index: usize) -> &[f64] {
        &self.velocity[index]
    }

    /// Learning rate of the current epoch under the cosine schedule.
    pub fn current_lr(&self) -> Result<f64> {
        cosine_lr(self.epoch, self.total_epochs, self.base_lr)
    }
}

/// One update: `v = momentum * v + (g + wd * w)`, `w -= lr * lr_mult * v`.
/// Weight decay is skipped for parameters with `decay == false`.
pub fn sgd_step(params: &mut ParamSet, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            detail: format!("{} velocity buffers for {} parameters", state.velocity.len(), params.len()),
        });
    }
    if let Some(p) = params.iter().find(|p| p.tensor.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let wd = if p.decay { state.weight_decay } else { 0.0 };
        let step = lr * p.lr_mult;
        let grad = p.tensor.grad.take().expect("checked above");
        let data = p.tensor.data_mut();
        for ((w, vel), g) in data.iter_mut().zip(v.iter_mut()).zip(&grad) {
            *vel = state.momentum * *vel + (g + wd * *w);
            *w -= step * *vel;
        }
        p.tensor.grad = Some(grad);
    }
    Ok(())
}

/// `base_lr * (1 + cos(pi * epoch / total_epochs)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::invalid(
            "epoch",
            format!("epoch {epoch} outside 0..{total_epochs}"),
        ));
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos()))
}
