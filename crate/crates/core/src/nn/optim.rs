use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::store::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Learning rate at `step` of `total` under half-cosine decay to zero.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Decoupled-weight-decay Adam over the trainable entries of a store.
/// Moment estimates are keyed by parameter name so they can be checkpointed.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, var) in store.trainable() {
            let w = var.as_tensor();
            let g = match grads.get(w) {
                Some(g) => g.detach(),
                None => continue,
            };
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => w.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => w.zeros_like()?,
            };
            let m = ((m_prev * b1)? + (&g * (1.0 - b1))?)?;
            let v = ((v_prev * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.cfg.eps)?)?;
            let decayed = (w.detach() * (1.0 - lr * self.cfg.weight_decay))?;
            let next = (decayed - (update * lr)?)?;
            var.set(&next)?;
            self.m.insert(name.to_string(), m.detach());
            self.v.insert(name.to_string(), v.detach());
        }
        Ok(())
    }

    /// Named state tensors: `m.<param>` and `v.<param>`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (n, t) in &self.m {
            out.push((format!("m.{n}"), t.clone()));
        }
        for (n, t) in &self.v {
            out.push((format!("v.{n}"), t.clone()));
        }
        out
    }

    pub fn load_state(&mut self, step: u64, state: Vec<(String, Tensor)>) -> Result<()> {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (name, t) in state {
            if let Some(p) = name.strip_prefix("m.") {
                self.m.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix("v.") {
                self.v.insert(p.to_string(), t);
            } else {
                return Err(Error::format("optimizer state", format!("unexpected entry `{name}`")));
            }
        }
        Ok(())
    }
}
