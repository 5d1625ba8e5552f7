use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            weight_decay: 0.0001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for Adam. Buffers are created on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One Adam update with bias-corrected moments. Weight decay is coupled:
/// `weight_decay * theta` is added to the gradient before the moments are
/// updated.
pub fn adam_step<T: Real>(params: &mut [&mut Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if let Some(missing) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::MissingGradient(missing));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        state.v = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
    }
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
        return Err(Error::shape(
            "adam_step",
            "moment buffers do not match the parameter list",
        ));
    }

    let cfg = state.config;
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (wd, eps) = (T::of(cfg.weight_decay), T::of(cfg.eps));
    let step_size = T::of(cfg.lr / bc1);
    let bc2_sqrt = T::of(bc2.sqrt());

    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad().expect("checked above").to_vec();
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad[i] + wd * data[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let denom = v[i].sqrt() / bc2_sqrt + eps;
            data[i] = data[i] - step_size * m[i] / denom;
        }
    }
    state.step += 1;
    Ok(())
}
