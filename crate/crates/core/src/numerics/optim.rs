//! AdamW with global-norm clipping and linear warmup.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            betas: (0.9, 0.99),
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: Some(1.0),
            warmup_steps: 5000,
        }
    }
}

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, constant afterwards.
pub fn lr_at_step(step: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base_lr
    } else {
        base_lr * step as f64 / warmup_steps as f64
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.tensor.numel()]).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
    pub lr: f64,
}

/// One AdamW update over every trainable parameter in `store`, using the
/// gradients currently held in the store.
///
/// Gradients are first clipped to `cfg.clip_norm` by global norm. Weight decay
/// is decoupled (`p -= lr * wd * p`). Frozen parameters are never touched.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<StepStats> {
    if state.m.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    let mut sq = 0.0f64;
    for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
        let Some(g) = &p.tensor.grad else { continue };
        for &x in g {
            if !x.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at optimizer step {}",
                    p.name,
                    state.step + 1
                )));
            }
            sq += x.as_f64() * x.as_f64();
        }
    }
    let grad_norm = sq.sqrt();
    let clip_scale = match cfg.clip_norm {
        Some(c) if grad_norm > c => c / (grad_norm + 1e-6),
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::of(b1), T::of(b2));
    let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    let step_size = T::of(lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(cfg.eps);
    let cs = T::of(clip_scale);

    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let Some(g) = p.tensor.grad.take() else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gj = g[j] * cs;
            m[j] = b1t * m[j] + ob1 * gj;
            v[j] = b2t * v[j] + ob2 * gj * gj;
            *w = *w * decay - step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
        p.tensor.grad = Some(g);
    }
    Ok(StepStats {
        grad_norm,
        clipped: clip_scale < 1.0,
        lr,
    })
}

/// [`adamw_step`] bundled with its state and warmup schedule.
#[derive(Clone, Debug)]
pub struct AdamW<T = f32> {
    pub cfg: AdamWConfig,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        AdamW {
            state: OptimizerState::for_store(store),
            cfg,
        }
    }

    /// Learning rate the next call to [`AdamW::step`] will use.
    pub fn next_lr(&self) -> f64 {
        lr_at_step(self.state.step + 1, self.cfg.lr, self.cfg.warmup_steps)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<StepStats> {
        let lr = self.next_lr();
        adamw_step(store, &mut self.state, &self.cfg, lr)
    }
}
