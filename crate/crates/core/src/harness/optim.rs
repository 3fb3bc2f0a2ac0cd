//! Adaptive-moment optimiser with decoupled weight decay, and the learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::config::{OptimConfig, Schedule};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

/// Learning rate used at `step` (0-based) of `total`.
pub fn lr_at(cfg: &OptimConfig, step: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            if cfg.steps == 0 {
                cfg.lr
            } else {
                0.5 * cfg.lr * (1.0 + (PI * step as f64 / cfg.steps as f64).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamW {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update with learning rate `lr`. Parameters without a gradient only decay.
    pub fn step(&mut self, cfg: &OptimConfig, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (key, p) in store.iter_mut() {
            let n = p.len();
            let m = self.m.entry(key.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(key.clone()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(key);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Shape(format!("gradient for {key} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
                }
            }
            let data = p.data_mut();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
                data[i] -= lr * (update + cfg.weight_decay * data[i]);
            }
        }
        Ok(())
    }
}
