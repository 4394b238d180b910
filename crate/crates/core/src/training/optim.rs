//! Adam with per-parameter state, a triangular cyclic learning rate, and
//! global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    /// Length of one full triangle, in epochs.
    pub cycle_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr_min: 1e-6, lr_max: 2e-4, cycle_epochs: 4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(5.0) }
    }
}

/// Triangular wave: `lr_min` at multiples of `steps_per_cycle`, `lr_max` half-way.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclicLr {
    pub lr_min: f64,
    pub lr_max: f64,
    pub steps_per_cycle: usize,
}

impl CyclicLr {
    pub fn new(lr_min: f64, lr_max: f64, steps_per_cycle: usize) -> Result<Self> {
        if !(lr_min > 0.0 && lr_min <= lr_max) || steps_per_cycle == 0 {
            return Err(Error::invalid(format!(
                "cyclic lr needs 0 < min ≤ max and a positive cycle (got {lr_min}, {lr_max}, {steps_per_cycle})"
            )));
        }
        Ok(Self { lr_min, lr_max, steps_per_cycle })
    }

    pub fn lr(&self, step: usize) -> f64 {
        let c = self.steps_per_cycle as f64;
        let phase = (step % self.steps_per_cycle) as f64 / c;
        let tri = 1.0 - (2.0 * phase - 1.0).abs();
        self.lr_min + (self.lr_max - self.lr_min) * tri
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// Bias-corrected Adam. Each parameter keeps its own step count, so a
/// parameter that receives no gradient in a step is left entirely alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Keyed by parameter name so the state survives a checkpoint round-trip.
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, state: BTreeMap::new() }
    }

    pub fn from_config(cfg: &OptimConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps)
    }

    /// Apply one update. Every gradient is checked before anything is
    /// modified, so a non-finite gradient leaves parameters and state intact.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, lr: f64) -> Result<()> {
        for (&id, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
            if g.shape() != store.get(id).shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter `{}` of shape {:?}",
                    g.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
        }
        let (b1, b2) = (self.beta1, self.beta2);
        for (&id, g) in grads {
            let st = self.state.entry(store.name(id).to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - b1.powi(st.t as i32);
            let c2 = 1.0 - b2.powi(st.t as i32);
            let p = store.get_mut(id).data_mut();
            for (((x, &gi), m), v) in p.iter_mut().zip(g.data()).zip(st.m.data_mut()).zip(st.v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &BTreeMap<ParamId, Tensor>) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescale all gradients so their joint norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<ParamId, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_assign(s);
        }
    }
    norm
}
