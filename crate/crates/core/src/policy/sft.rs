//! Supervised finetuning on labeled episodes: the starting checkpoint.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::batch::batch_gradients;
use super::{Policy, PolicyError, Result};
use crate::optim::{clip_global_norm, scale, Adam, AdamConfig};
use crate::rng::child_rng;
use crate::tensor::TensorError;
use crate::tokenizer::TokenSequence;
use crate::world::{Episode, Question, ToyImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Linear warmup length; the rate then follows a cosine decay to zero
    /// when `cosine_decay` is set and stays flat otherwise.
    pub warmup_steps: usize,
    pub cosine_decay: bool,
    /// Trailing fraction of episodes held out for the cross-entropy report.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            clip_norm: Some(1.0),
            warmup_steps: 100,
            cosine_decay: true,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub steps: usize,
    /// Mean per-token cross-entropy on held-out answers before training.
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
    /// Mean per-token training cross-entropy at every step.
    pub train_losses: Vec<f64>,
}

struct Example<'a> {
    image: &'a ToyImage,
    question: &'a Question,
    answer: &'a TokenSequence,
}

fn examples(corpus: &[Episode]) -> Vec<Example<'_>> {
    corpus
        .iter()
        .flat_map(|ep| {
            ep.questions
                .iter()
                .zip(&ep.truth)
                .map(move |(question, answer)| Example {
                    image: &ep.image,
                    question,
                    answer,
                })
        })
        .collect()
}

/// Mean per-token cross-entropy of `policy` on the examples.
fn token_loss(policy: &Policy, items: &[Example<'_>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for ex in items {
        nll -= policy.sequence_logprob(ex.image, ex.question, ex.answer)?;
        tokens += ex.answer.len();
    }
    Ok(nll / tokens.max(1) as f64)
}

/// Learning rate at `step` of `total`.
pub fn scheduled_rate(config: &SftConfig, step: usize) -> f64 {
    let peak = config.adam.learning_rate;
    if step < config.warmup_steps {
        return peak * (step + 1) as f64 / config.warmup_steps as f64;
    }
    if !config.cosine_decay {
        return peak;
    }
    let span = config.steps.saturating_sub(config.warmup_steps).max(1) as f64;
    let progress = (step - config.warmup_steps) as f64 / span;
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn diverged(step: usize, loss: f64, config: &SftConfig) -> PolicyError {
    PolicyError::Diverged {
        step,
        loss,
        config: serde_json::to_string(config).unwrap_or_default(),
    }
}

/// Teacher-forced cross-entropy training on every (image, question, truth)
/// triple of `corpus`. All parameters train; adapters, if any, are ignored.
pub fn sft_train(policy: &Policy, corpus: &[Episode], config: &SftConfig) -> Result<(Policy, SftReport)> {
    if corpus.is_empty() {
        return Err(PolicyError::EmptyCorpus);
    }
    let mut policy = policy.without_lora();
    let n_holdout = ((corpus.len() as f64) * config.holdout_fraction).round() as usize;
    let n_holdout = n_holdout.min(corpus.len().saturating_sub(1));
    let (train_eps, holdout_eps) = corpus.split_at(corpus.len() - n_holdout);
    let train = examples(train_eps);
    let holdout = examples(holdout_eps);
    let initial_holdout_loss = token_loss(&policy, &holdout)?;

    let mut opt = Adam::new(config.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0u64;
    let mut train_losses = Vec::with_capacity(config.steps);
    let batch_size = config.batch_size.max(1).min(train.len());
    for step in 0..config.steps {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut child_rng(config.seed, epoch));
            epoch += 1;
            cursor = 0;
        }
        let batch: Vec<&Example<'_>> = order[cursor..cursor + batch_size].iter().map(|&i| &train[i]).collect();
        cursor += batch_size;
        let n_tokens: usize = batch.iter().map(|ex| ex.answer.len()).sum();
        let result = batch_gradients(&policy, &batch, |g, p, ex| {
            let logp = policy.score_answers(g, p, ex.image, ex.question, &[ex.answer])?[0];
            Ok((g.neg(logp)?, ()))
        });
        let (losses, mut grads) = match result {
            Ok(r) => r,
            Err(PolicyError::Tensor(TensorError::NonFinite { .. })) => return Err(diverged(step, f64::NAN, config)),
            Err(e) => return Err(e),
        };
        let loss = losses.iter().map(|(l, _)| l).sum::<f64>() / n_tokens as f64;
        if !loss.is_finite() {
            return Err(diverged(step, loss, config));
        }
        scale(&mut grads, 1.0 / n_tokens as f64);
        if let Some(max) = config.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        opt.set_learning_rate(scheduled_rate(config, step));
        opt.step(policy.trainable_mut(), &grads);
        train_losses.push(loss);
    }
    let final_holdout_loss = token_loss(&policy, &holdout)?;
    Ok((
        policy,
        SftReport {
            steps: config.steps,
            initial_holdout_loss,
            final_holdout_loss,
            train_losses,
        },
    ))
}
