//! Warmup + cosine learning-rate schedule and the AdamW optimizer.

use std::f64::consts::PI;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, TensorBlob};

/// Linear warmup from zero to `base_lr`, then cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, min_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        let s = Self {
            base_lr,
            min_lr,
            warmup_steps,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::range(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.min_lr.is_finite() && self.base_lr.is_finite()) || self.min_lr < 0.0 || self.min_lr > self.base_lr {
            return Err(Error::range(format!(
                "need 0 <= min_lr ({}) <= base_lr ({})",
                self.min_lr, self.base_lr
            )));
        }
        Ok(())
    }

    /// Learning rate at `step`, for `0 <= step <= total_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::range(format!("step {step} beyond total_steps {}", self.total_steps)));
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: TensorBlob,
    pub second: TensorBlob,
}

/// Per-parameter moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamWConfig,
    pub step: u64,
    pub moments: IndexMap<String, Moments>,
}

impl OptimizerState {
    /// Zero moments for every trainable entry of `params`.
    pub fn new(params: &ParamStore, hyper: AdamWConfig) -> Self {
        let moments = params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(name, e)| {
                (
                    name.to_owned(),
                    Moments {
                        first: TensorBlob::zeros(e.tensor.shape()),
                        second: TensorBlob::zeros(e.tensor.shape()),
                    },
                )
            })
            .collect();
        Self { hyper, step: 0, moments }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
///
/// Every trainable parameter must have a gradient of matching shape; frozen
/// parameters must have none. Nothing is mutated if validation fails.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &IndexMap<String, TensorBlob>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let entry = params
            .entry(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name:?}")))?;
        if !entry.trainable {
            return Err(Error::contract(format!("gradient supplied for frozen parameter {name:?}")));
        }
        if entry.tensor.shape() != g.shape() {
            return Err(Error::contract(format!(
                "gradient for {name:?} has shape {:?}, parameter has {:?}",
                g.shape(),
                entry.tensor.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient for {name:?}")));
        }
    }
    for (name, e) in params.iter() {
        if e.trainable {
            if !grads.contains_key(name) {
                return Err(Error::contract(format!("missing gradient for trainable parameter {name:?}")));
            }
            match state.moments.get(name) {
                Some(m) if m.first.shape() == e.tensor.shape() => {}
                _ => return Err(Error::contract(format!("optimizer state has no moments for {name:?}"))),
            }
        }
    }

    let h = state.hyper;
    let t = state.step + 1;
    let bc1 = 1.0 - h.beta1.powf(t as f64);
    let bc2 = 1.0 - h.beta2.powf(t as f64);
    let decay = 1.0 - lr * h.weight_decay;
    for (name, entry) in params.iter_mut() {
        if !entry.trainable {
            continue;
        }
        let g = grads[name].data();
        let m = state.moments.get_mut(name).expect("validated above");
        let w = entry.tensor.data_mut();
        let (first, second) = (m.first.data_mut(), m.second.data_mut());
        for i in 0..w.len() {
            let gi = g[i] as f64;
            let mi = h.beta1 * first[i] as f64 + (1.0 - h.beta1) * gi;
            let vi = h.beta2 * second[i] as f64 + (1.0 - h.beta2) * gi * gi;
            first[i] = mi as f32;
            second[i] = vi as f32;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + h.eps);
            w[i] = (w[i] as f64 * decay - update) as f32;
        }
        if !entry.tensor.is_finite() {
            return Err(Error::numeric(format!("parameter {name:?} became non-finite")));
        }
    }
    state.step = t;
    Ok(())
}
