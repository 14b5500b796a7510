//! Adam with bias correction, global-norm clipping and the warmup/linear
//! decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |id| Tensor::zeros(params.value(id).shape());
        Self {
            config,
            m: params.ids().map(zeros).collect(),
            v: params.ids().map(zeros).collect(),
            step: 0,
        }
    }
}

/// One Adam update from the gradients accumulated in `params`, followed by
/// rounding to the store's precision.
pub fn adam_step(params: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} moment slots for {} parameters", state.m.len(), params.len()),
        ));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let (value, grad) = params.value_and_grad_mut(id);
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        if m.len() != value.len() || grad.len() != value.len() {
            return Err(Error::shape("adam_step", "moment or gradient shape differs from parameter"));
        }
        let (m, v) = (m.data_mut(), v.data_mut());
        for (((x, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    params.round_to_storage();
    Ok(())
}

/// L2 norm over every accumulated gradient.
pub fn global_grad_norm(params: &ParamStore) -> f64 {
    params
        .ids()
        .map(|id| params.grad(id).data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales the accumulated gradients to norm `max_norm` when they exceed
/// it. Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            params.scale_grad(id, s);
        }
    }
    norm
}

/// Linear warmup to `base_lr` over `warmup_steps`, then linear decay to zero
/// at `total_steps`. `step` counts completed updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "warmup {warmup_steps} exceeds total {total_steps} steps"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Warmup as a fraction of the total, rounded down.
    pub fn with_warmup_fraction(base_lr: f64, fraction: f64, total_steps: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("warmup fraction {fraction} outside [0, 1]")));
        }
        Self::new(base_lr, (fraction * total_steps as f64).floor() as u64, total_steps)
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return if self.warmup_steps == self.total_steps && step == self.total_steps {
                self.base_lr
            } else {
                0.0
            };
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        self.base_lr * (self.total_steps - step) as f64 / span
    }
}
