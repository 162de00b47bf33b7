use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::{Error, Result};

/// Adam hyperparameters. Defaults: lr 1e-3, betas 0.9/0.999, epsilon 1e-7,
/// no weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay, applied as `w -= lr * decay * w`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-7, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let first: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        let second = first.clone();
        Self { config, first, second, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &[f64] {
        &self.first[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &[f64] {
        &self.second[id.index()]
    }

    /// One bias-corrected update of every parameter from its stored gradient.
    /// Parameters without a gradient buffer are treated as having zero
    /// gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        self.step_only(store, &ids)
    }

    /// Updates only `ids`; moments of other parameters are left untouched.
    pub fn step_only(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Contract("optimizer state does not match parameter store".into()));
        }
        for &id in ids {
            if let Some(g) = store.get(id).grad() {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFiniteGradient { param: store.name(id).into() });
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(c.beta1, t);
        let bc2 = 1.0 - libm::pow(c.beta2, t);
        for &id in ids {
            let idx = id.index();
            let tensor = store.get_mut(id);
            let grad = tensor.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= c.learning_rate * (m_hat / (libm::sqrt(v_hat) + c.epsilon) + c.weight_decay * data[j]);
            }
        }
        Ok(())
    }
}
