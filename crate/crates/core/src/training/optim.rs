//! Adam with coupled L2 weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay · param`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// One Adam update of a flat parameter block. `step` is the 1-based index of
/// this update.
pub fn adam_step(
    cfg: &AdamConfig,
    lr: f64,
    step: u64,
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
) {
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..param.len() {
        let g = grad[i] + cfg.weight_decay * param[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Moment buffers for every trainable entry of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub moments: Vec<(ParamId, Tensor, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub state: OptimState,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let moments = store
            .ids()
            .filter(|&id| store.entry(id).trainable)
            .map(|id| {
                let shape = store.get(id).shape();
                (id, Tensor::zeros(shape), Tensor::zeros(shape))
            })
            .collect();
        Ok(Adam {
            cfg,
            state: OptimState { step: 0, moments },
        })
    }

    /// Applies one update. Any non-finite gradient aborts before a single
    /// parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        if grads.len() != self.state.moments.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} trainable parameters",
                grads.len(),
                self.state.moments.len()
            )));
        }
        for ((id, g), (mid, m, _)) in grads.iter().zip(&self.state.moments) {
            if id != mid || g.shape() != m.shape() {
                return Err(Error::contract(format!(
                    "gradient for `{}` does not match its optimizer slot",
                    store.entry(*id).name
                )));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in `{}` element {i} at step {}",
                    g.data()[i],
                    store.entry(*id).name,
                    self.state.step + 1
                )));
            }
        }
        self.state.step += 1;
        let step = self.state.step;
        for ((id, g), (_, m, v)) in grads.iter().zip(&mut self.state.moments) {
            adam_step(
                &self.cfg,
                lr,
                step,
                store.get_mut(*id).data_mut(),
                g.data(),
                m.data_mut(),
                v.data_mut(),
            );
        }
        Ok(())
    }
}

/// `base_lr · gamma^⌊epoch / every⌋`; `every = 0` keeps the rate constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub every: usize,
    pub gamma: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.every == 0 {
            return self.base_lr;
        }
        self.base_lr * self.gamma.powi((epoch / self.every) as i32)
    }
}
