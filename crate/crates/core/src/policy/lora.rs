//! Low-rank adapters over the policy's projection weights.
//!
//! Weights are stored input-major (`y = x W`, `W: [d_in, d_out]`), so the
//! adapter for `W` is a down-projection `A: [d_in, r]` and an up-projection
//! `B: [r, d_out]`, and the effective weight is `W + (alpha / r) A B`.
//! `B` starts at zero, which makes a freshly adapted policy compute exactly
//! what its base computes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{init_tensor, Policy, PolicyError, Result, ADAPTABLE};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Default `alpha / r`.
pub const DEFAULT_ALPHA_RATIO: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl LoraConfig {
    /// Rank `r` with `alpha = 2 r`.
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            alpha: DEFAULT_ALPHA_RATIO * rank as f64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    rank: usize,
    alpha: f64,
    /// `<weight>.lora_a` and `<weight>.lora_b` tensors.
    tensors: BTreeMap<String, Tensor>,
}

impl LoraAdapter {
    pub fn a_name(weight: &str) -> String {
        format!("{weight}.lora_a")
    }

    pub fn b_name(weight: &str) -> String {
        format!("{weight}.lora_b")
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn factors(&self, weight: &str) -> Option<(&Tensor, &Tensor)> {
        Some((
            self.tensors.get(&Self::a_name(weight))?,
            self.tensors.get(&Self::b_name(weight))?,
        ))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn param_names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Names of the wrapped base weights.
    pub fn adapted_weights(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter_map(|k| k.strip_suffix(".lora_a").map(str::to_string))
            .collect()
    }

    pub(crate) fn from_parts(rank: usize, alpha: f64, tensors: BTreeMap<String, Tensor>) -> Self {
        Self { rank, alpha, tensors }
    }
}

impl Policy {
    /// Freezes the base weights and wraps every attention, MLP and output
    /// projection in a rank-`r` adapter.
    pub fn attach_lora(&self, config: LoraConfig) -> Result<Policy> {
        if config.rank == 0 {
            return Err(PolicyError::Config("lora rank must be at least 1".into()));
        }
        if !(config.alpha.is_finite() && config.alpha > 0.0) {
            return Err(PolicyError::Config("lora alpha must be positive".into()));
        }
        let mut tensors = BTreeMap::new();
        let targets: Vec<&String> = self
            .params
            .keys()
            .filter(|name| ADAPTABLE.iter().any(|suffix| name.ends_with(suffix)))
            .collect();
        for (i, name) in targets.into_iter().enumerate() {
            let shape = self.params[name].shape();
            let (d_in, d_out) = (shape[0], shape[1]);
            let limit = d_in.min(d_out);
            if config.rank > limit {
                return Err(PolicyError::LoraRank {
                    rank: config.rank,
                    limit,
                    weight: name.clone(),
                });
            }
            let a = init_tensor(
                vec![d_in, config.rank],
                1.0 / (d_in as f64).sqrt(),
                derive_seed(config.seed, i as u64),
            );
            tensors.insert(LoraAdapter::a_name(name), a);
            tensors.insert(LoraAdapter::b_name(name), Tensor::zeros(vec![config.rank, d_out]));
        }
        let mut adapted = self.clone();
        adapted.lora = Some(LoraAdapter {
            rank: config.rank,
            alpha: config.alpha,
            tensors,
        });
        Ok(adapted)
    }

    /// Same base weights, adapters removed.
    pub fn without_lora(&self) -> Policy {
        let mut p = self.clone();
        p.lora = None;
        p
    }
}
