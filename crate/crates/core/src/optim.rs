//! Adaptive-moment optimizer over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Named gradient buffers, keyed like the parameter store.
pub type GradMap = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) {
        self.config.learning_rate = learning_rate;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &GradMap) {
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(param) = params.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for (((p, g), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let update = (*mi / bias1) / ((*vi / bias2).sqrt() + c.eps);
                *p -= c.learning_rate * (update + c.weight_decay * *p);
            }
        }
    }
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Adds `src` into `dst` elementwise, inserting missing entries.
pub fn accumulate(dst: &mut GradMap, src: GradMap) {
    for (name, g) in src {
        match dst.get_mut(&name) {
            Some(d) => d.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => {
                dst.insert(name, g);
            }
        }
    }
}

pub fn scale(grads: &mut GradMap, factor: f64) {
    grads.values_mut().flatten().for_each(|g| *g *= factor);
}
