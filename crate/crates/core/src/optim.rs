//! Adam with per-tensor state keyed by parameter name.

use std::collections::BTreeMap;

use ndarray::{Array, ArrayD, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{GmopeError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(GmopeError::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(GmopeError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || self.weight_decay < 0.0 {
            return Err(GmopeError::Config("Adam epsilon must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Slot<T> {
    m: ArrayD<T>,
    v: ArrayD<T>,
    t: i32,
}

/// Each named tensor keeps its own moment estimates and step count, so a
/// tensor that receives no gradient on a step is left untouched.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    slots: BTreeMap<String, Slot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            slots: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self, name: &str) -> u32 {
        self.slots.get(name).map_or(0, |s| s.t as u32)
    }

    pub fn step<D: Dimension>(&mut self, name: &str, param: &mut Array<T, D>, grad: &Array<T, D>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(GmopeError::arg(format!("gradient shape mismatch for {name}")));
        }
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: ArrayD::zeros(param.shape()),
            v: ArrayD::zeros(param.shape()),
            t: 0,
        });
        if slot.m.shape() != param.shape() {
            return Err(GmopeError::State(format!("optimizer state for {name} has a different shape")));
        }
        slot.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let lr = T::from_f64_lossy(c.learning_rate);
        let eps = T::from_f64_lossy(c.epsilon);
        let wd = T::from_f64_lossy(c.weight_decay);
        let bc1 = T::one() - b1.powi(slot.t);
        let bc2 = T::one() - b2.powi(slot.t);
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(slot.m.iter_mut())
            .zip(slot.v.iter_mut())
        {
            let g = g + wd * *p;
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
