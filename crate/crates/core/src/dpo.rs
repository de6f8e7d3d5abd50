//! Direct preference optimization.
//!
//! The implicit reward of an answer is `beta * (log pi(y|x) - log ref(y|x))`;
//! the loss is the Bradley-Terry negative log-likelihood of the chosen answer
//! beating the rejected one under that reward. Reference log-probabilities
//! are computed once per dataset since the reference never changes.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{clip_global_norm, scale, Adam, AdamConfig, GradMap};
use crate::policy::batch::batch_gradients;
use crate::policy::{generate, BoundParams, Policy, PolicyError};
use crate::prefgen::PreferenceRecord;
use crate::rng::{child_rng, derive_seed};
use crate::tensor::{log_sigmoid, softplus, Graph, TensorError, Var};
use crate::tokenizer::TokenSequence;
use crate::world::{Question, ToyImage, UnlabeledEpisode};

#[derive(Debug, Error)]
pub enum DpoError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("record {index} has {count} rejected answers; use dpo_loss_multi for multi-negative data")]
    MultiNegative { index: usize, count: usize },
    #[error("record {index} has no rejected answers")]
    NoRejected { index: usize },
    #[error("record {index} refers to an image missing from the corpus or with a different hash")]
    MissingImage { index: usize },
    #[error("invalid dpo config: {0}")]
    Config(String),
    #[error("preference dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at step {step}; last good policy retained")]
    Diverged { step: usize, last_good: Box<Policy> },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DpoError>;

/// How several rejected answers enter one loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiForm {
    /// `-log sigmoid(beta*dc - sum_i beta*dr_i)`.
    Displayed,
    /// Cross-entropy of the chosen answer against a softmax over all answers'
    /// rewards, consistent with the multi-way Bradley-Terry probability.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// `None` trains the single-negative loss; multi-negative records are
    /// then rejected.
    pub multi: Option<MultiForm>,
    pub clip_norm: Option<f64>,
    /// Shuffle seed; also keys the KL probe samples.
    pub seed: u64,
    /// Steps between KL and probe-margin evaluations; 0 disables them.
    pub probe_every: usize,
    pub probe_prompts: usize,
    pub probe_samples: usize,
    pub max_answer_len: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            epochs: 1,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            multi: None,
            clip_norm: None,
            seed: 0,
            probe_every: 10,
            probe_prompts: 16,
            probe_samples: 2,
            max_answer_len: crate::prefgen::DEFAULT_MAX_ANSWER_LEN,
        }
    }
}

impl DpoConfig {
    /// Full-scale recipe: batch 128, learning rate 2e-6.
    pub fn paper_preset() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 2e-6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(DpoError::Config("beta must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(DpoError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(DpoError::Config("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Probability that the chosen answer beats every rejected one when answers
/// are picked in proportion to `exp(reward)`.
pub fn bt_probability(r_chosen: f64, r_rejected: &[f64]) -> f64 {
    let mut all = Vec::with_capacity(r_rejected.len() + 1);
    all.push(r_chosen);
    all.extend_from_slice(r_rejected);
    (r_chosen - log_sum_exp(&all)).exp()
}

/// `-log bt_probability`, without leaving log space.
pub fn bt_nll(r_chosen: f64, r_rejected: &[f64]) -> f64 {
    let mut all = Vec::with_capacity(r_rejected.len() + 1);
    all.push(r_chosen);
    all.extend_from_slice(r_rejected);
    log_sum_exp(&all) - r_chosen
}

/// Contrastive losses over one positive and several negative scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoNce {
    /// `-log(e^{f+} / (e^{f+} + sum e^{f-}))` over all negatives.
    pub l_in: f64,
    /// The same loss restricted to the first negative.
    pub l_single: f64,
    /// `softplus(-(f+ - f-))` for the first negative.
    pub l_single_softplus: f64,
}

/// `f(q, k) = q . k / tau`.
pub fn infonce_score(q: &[f64], k: &[f64], tau: f64) -> f64 {
    q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / tau
}

/// # Panics
/// If `f_neg` is empty.
pub fn infonce_bridge(f_pos: f64, f_neg: &[f64]) -> InfoNce {
    assert!(!f_neg.is_empty(), "at least one negative score");
    InfoNce {
        l_in: bt_nll(f_pos, f_neg),
        l_single: bt_nll(f_pos, &f_neg[..1]),
        l_single_softplus: softplus(-(f_pos - f_neg[0])),
    }
}

/// Single-negative loss from summed log-probabilities.
pub fn dpo_loss_value(policy_c: f64, ref_c: f64, policy_r: f64, ref_r: f64, beta: f64) -> f64 {
    softplus(-beta * ((policy_c - ref_c) - (policy_r - ref_r)))
}

/// Multi-negative loss from summed log-probabilities.
pub fn dpo_loss_multi_value(
    policy_c: f64,
    ref_c: f64,
    policy_r: &[f64],
    ref_r: &[f64],
    beta: f64,
    form: MultiForm,
) -> f64 {
    let rc = beta * (policy_c - ref_c);
    let rr: Vec<f64> = policy_r.iter().zip(ref_r).map(|(p, r)| beta * (p - r)).collect();
    match form {
        MultiForm::Displayed => -log_sigmoid(rc - rr.iter().sum::<f64>()),
        MultiForm::Softmax => bt_nll(rc, &rr),
    }
}

/// One record with its image resolved.
#[derive(Debug, Clone, Copy)]
pub struct PairView<'a> {
    pub image: &'a ToyImage,
    pub question: &'a Question,
    pub chosen: &'a TokenSequence,
    pub rejected: &'a [TokenSequence],
}

impl PairView<'_> {
    fn answers(&self) -> Vec<&TokenSequence> {
        std::iter::once(self.chosen).chain(self.rejected).collect()
    }
}

pub fn resolve<'a>(records: &'a [PreferenceRecord], corpus: &'a [UnlabeledEpisode]) -> Result<Vec<PairView<'a>>> {
    records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let ep = corpus
                .get(r.image_ref.episode)
                .ok_or(DpoError::MissingImage { index })?;
            if ep.image.content_hash() != r.image_ref.hash {
                return Err(DpoError::MissingImage { index });
            }
            if r.rejected.is_empty() {
                return Err(DpoError::NoRejected { index });
            }
            Ok(PairView {
                image: &ep.image,
                question: &r.question,
                chosen: &r.chosen,
                rejected: &r.rejected,
            })
        })
        .collect()
}

/// Summed log-probabilities of one record's answers, chosen first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerScores {
    pub chosen: f64,
    pub rejected: Vec<f64>,
}

/// Scores of every record under a fixed model, in parallel.
pub fn score_records(model: &Policy, views: &[PairView<'_>]) -> Result<Vec<AnswerScores>> {
    views
        .par_iter()
        .map(|v| {
            let lp = model.sequence_logprobs(v.image, v.question, &v.answers())?;
            Ok(AnswerScores {
                chosen: lp[0],
                rejected: lp[1..].to_vec(),
            })
        })
        .collect()
}

/// `beta * (log pi(y|x) - log ref(y|x))`.
pub fn implicit_reward(
    policy: &Policy,
    reference: &Policy,
    image: &ToyImage,
    question: &Question,
    answer: &TokenSequence,
    beta: f64,
) -> Result<f64> {
    let p = policy.sequence_logprob(image, question, answer)?;
    let r = reference.sequence_logprob(image, question, answer)?;
    Ok(beta * (p - r))
}

fn check_single(views: &[PairView<'_>]) -> Result<()> {
    match views.iter().position(|v| v.rejected.len() != 1) {
        Some(index) => Err(DpoError::MultiNegative {
            index,
            count: views[index].rejected.len(),
        }),
        None => Ok(()),
    }
}

/// Batch-mean single-negative loss.
pub fn dpo_loss(policy: &Policy, reference: &Policy, views: &[PairView<'_>], beta: f64) -> Result<f64> {
    check_single(views)?;
    if views.is_empty() {
        return Err(DpoError::EmptyDataset);
    }
    let pol = score_records(policy, views)?;
    let refs = score_records(reference, views)?;
    let total: f64 = pol
        .iter()
        .zip(&refs)
        .map(|(p, r)| dpo_loss_value(p.chosen, r.chosen, p.rejected[0], r.rejected[0], beta))
        .sum();
    Ok(total / views.len() as f64)
}

/// Batch-mean multi-negative loss.
pub fn dpo_loss_multi(
    policy: &Policy,
    reference: &Policy,
    views: &[PairView<'_>],
    beta: f64,
    form: MultiForm,
) -> Result<f64> {
    if views.is_empty() {
        return Err(DpoError::EmptyDataset);
    }
    if let Some(index) = views.iter().position(|v| v.rejected.is_empty()) {
        return Err(DpoError::NoRejected { index });
    }
    let pol = score_records(policy, views)?;
    let refs = score_records(reference, views)?;
    let total: f64 = pol
        .iter()
        .zip(&refs)
        .map(|(p, r)| dpo_loss_multi_value(p.chosen, r.chosen, &p.rejected, &r.rejected, beta, form))
        .sum();
    Ok(total / views.len() as f64)
}

/// Per-record statistics gathered alongside the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordStats {
    /// `beta * (dc - sum dr)`; the usual reward margin for one negative.
    pub margin: f64,
    pub chosen_logratio: f64,
    /// Mean over the record's rejected answers.
    pub rejected_logratio: f64,
    /// Loss of the multi-negative form not being trained, for comparison.
    pub alt_loss: Option<f64>,
}

/// Loss node of one record, differentiable in the policy parameters.
pub fn record_loss(
    policy: &Policy,
    g: &mut Graph,
    p: &BoundParams,
    view: &PairView<'_>,
    refs: &AnswerScores,
    beta: f64,
    multi: Option<MultiForm>,
) -> Result<(Var, RecordStats)> {
    let lp = policy.score_answers(g, p, view.image, view.question, &view.answers())?;
    let ratio = |g: &mut Graph, v: Var, r: f64| -> Result<Var> {
        let c = g.constant(vec![1], vec![r])?;
        Ok(g.sub(v, c)?)
    };
    let dc = ratio(g, lp[0], refs.chosen)?;
    let mut dr = Vec::with_capacity(lp.len() - 1);
    for (v, r) in lp[1..].iter().zip(&refs.rejected) {
        dr.push(ratio(g, *v, *r)?);
    }
    let chosen_logratio = g.scalar(dc);
    let rejected: Vec<f64> = dr.iter().map(|v| g.scalar(*v)).collect();
    let rejected_sum: f64 = rejected.iter().sum();
    let alt_loss = multi.map(|form| {
        let other = match form {
            MultiForm::Displayed => MultiForm::Softmax,
            MultiForm::Softmax => MultiForm::Displayed,
        };
        dpo_loss_multi_value(chosen_logratio, 0.0, &rejected, &vec![0.0; rejected.len()], beta, other)
    });
    let stats = RecordStats {
        margin: beta * chosen_logratio - beta * rejected_sum,
        chosen_logratio,
        rejected_logratio: rejected_sum / dr.len() as f64,
        alt_loss,
    };
    let loss = match multi {
        None => {
            let diff = g.sub(dc, dr[0])?;
            let z = g.scale(diff, -beta)?;
            g.softplus(z)?
        }
        Some(MultiForm::Displayed) => {
            let mut z = g.scale(dc, beta)?;
            for d in &dr {
                let s = g.scale(*d, beta)?;
                z = g.sub(z, s)?;
            }
            let z = g.neg(z)?;
            g.softplus(z)?
        }
        Some(MultiForm::Softmax) => {
            let mut cols = Vec::with_capacity(lp.len());
            for d in std::iter::once(&dc).chain(&dr) {
                let s = g.scale(*d, beta)?;
                cols.push(g.reshape(s, vec![1, 1])?);
            }
            let row = g.concat_cols(&cols)?;
            let logp = g.log_softmax(row)?;
            let picked = g.gather(logp, vec![0])?;
            let picked = g.sum(picked)?;
            g.neg(picked)?
        }
    };
    Ok((loss, stats))
}

/// Batch-mean loss, its gradient over the trainable parameters, and the
/// per-record statistics.
pub fn loss_and_grad(
    policy: &Policy,
    views: &[PairView<'_>],
    refs: &[AnswerScores],
    beta: f64,
    multi: Option<MultiForm>,
) -> Result<(f64, GradMap, Vec<RecordStats>)> {
    if views.is_empty() {
        return Err(DpoError::EmptyDataset);
    }
    if multi.is_none() {
        check_single(views)?;
    }
    let items: Vec<(&PairView<'_>, &AnswerScores)> = views.iter().zip(refs).collect();
    let (out, mut grads) = batch_gradients(policy, &items, |g, p, (view, r)| {
        record_loss(policy, g, p, view, r, beta, multi).map_err(|e| match e {
            DpoError::Policy(e) => e,
            DpoError::Tensor(e) => PolicyError::Tensor(e),
            other => PolicyError::Config(other.to_string()),
        })
    })?;
    let n = views.len() as f64;
    scale(&mut grads, 1.0 / n);
    let loss = out.iter().map(|(l, _)| l).sum::<f64>() / n;
    Ok((loss, grads, out.into_iter().map(|(_, s)| s).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub mean_margin: f64,
    pub positive_fraction: f64,
    pub n: usize,
}

/// Reward margins of `policy` over every record.
pub fn margin_stats(policy: &Policy, views: &[PairView<'_>], refs: &[AnswerScores], beta: f64) -> Result<MarginStats> {
    let pol = score_records(policy, views)?;
    let margins: Vec<f64> = pol
        .iter()
        .zip(refs)
        .map(|(p, r)| {
            beta * (p.chosen - r.chosen)
                - p.rejected
                    .iter()
                    .zip(&r.rejected)
                    .map(|(a, b)| beta * (a - b))
                    .sum::<f64>()
        })
        .collect();
    Ok(summarize_margins(&margins))
}

fn summarize_margins(margins: &[f64]) -> MarginStats {
    let n = margins.len();
    if n == 0 {
        return MarginStats {
            mean_margin: 0.0,
            positive_fraction: 0.0,
            n,
        };
    }
    MarginStats {
        mean_margin: margins.iter().sum::<f64>() / n as f64,
        positive_fraction: margins.iter().filter(|m| **m > 0.0).count() as f64 / n as f64,
        n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

/// Monte Carlo estimate of `E_x KL(policy(.|x) || ref(.|x))` from answers
/// sampled at temperature 1: the mean log-ratio of the samples.
pub fn kl_diagnostic(
    policy: &Policy,
    reference: &Policy,
    probes: &[(&ToyImage, &Question)],
    n_samples: usize,
    max_len: usize,
    seed: u64,
) -> Result<KlEstimate> {
    if n_samples == 0 {
        return Err(DpoError::Config("n_samples must be at least 1".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..probes.len())
        .flat_map(|i| (0..n_samples).map(move |s| (i, s)))
        .collect();
    let ratios: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let (image, question) = probes[i];
            let y = generate(
                policy,
                image,
                question,
                1.0,
                max_len,
                derive_seed(seed, (i * n_samples + s) as u64),
            )?;
            let lp = y.logprob().expect("generate records logprob");
            Ok(lp - reference.sequence_logprob(image, question, &y)?)
        })
        .collect::<Result<_>>()?;
    let n = ratios.len();
    if n == 0 {
        return Ok(KlEstimate {
            mean: 0.0,
            std_err: 0.0,
            n,
        });
    }
    let mean = ratios.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok(KlEstimate {
        mean,
        std_err: (var / n as f64).sqrt(),
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    pub loss: f64,
    pub margin: f64,
    pub margin_pos_frac: f64,
    pub chosen_logratio: f64,
    pub rejected_logratio: f64,
    /// Most recent KL estimate (refreshed every `probe_every` steps).
    pub kl_estimate: f64,
    /// Mean margin on a fixed probe batch (refreshed with the KL estimate).
    pub probe_margin: f64,
    /// Batch loss under the other multi-negative form; empty for single
    /// negatives.
    pub alt_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        buf
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct DpoRun {
    pub policy: Policy,
    pub log: TrainLog,
    /// Margins of the trained policy over the whole training set.
    pub final_margins: MarginStats,
}

/// Trains the adapters of `policy` against the frozen `reference`.
///
/// `policy` should start equal to `reference` (fresh zero-initialized
/// adapters), which makes the first logged loss exactly `ln 2`.
pub fn train_dpo(
    policy: &Policy,
    reference: &Policy,
    records: &[PreferenceRecord],
    corpus: &[UnlabeledEpisode],
    config: &DpoConfig,
) -> Result<DpoRun> {
    config.validate()?;
    if records.is_empty() {
        return Err(DpoError::EmptyDataset);
    }
    let views = resolve(records, corpus)?;
    if config.multi.is_none() {
        check_single(&views)?;
    }
    let refs = score_records(reference, &views)?;
    let probe_n = config.probe_prompts.min(views.len());
    let probes: Vec<(&ToyImage, &Question)> = views[..probe_n].iter().map(|v| (v.image, v.question)).collect();

    let mut policy = policy.clone();
    let mut opt = Adam::new(config.adam());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..views.len()).collect();
    let mut step = 0usize;
    let (mut kl, mut probe_margin) = (0.0, 0.0);
    for epoch in 0..config.epochs {
        order.shuffle(&mut child_rng(config.seed, epoch as u64));
        for batch_idx in order.chunks(config.batch_size) {
            if config.probe_every > 0 && step.is_multiple_of(config.probe_every) && probe_n > 0 {
                let seed = derive_seed(config.seed ^ 0x6b6c, step as u64);
                kl = kl_diagnostic(
                    &policy,
                    reference,
                    &probes,
                    config.probe_samples.max(1),
                    config.max_answer_len,
                    seed,
                )?
                .mean;
                probe_margin = margin_stats(&policy, &views[..probe_n], &refs[..probe_n], config.beta)?.mean_margin;
            }
            let bv: Vec<PairView<'_>> = batch_idx.iter().map(|&i| views[i]).collect();
            let br: Vec<AnswerScores> = batch_idx.iter().map(|&i| refs[i].clone()).collect();
            let (loss, mut grads, stats) = match loss_and_grad(&policy, &bv, &br, config.beta, config.multi) {
                Ok(r) => r,
                Err(DpoError::Policy(PolicyError::Tensor(TensorError::NonFinite { .. }))) => {
                    return Err(DpoError::Diverged {
                        step,
                        last_good: Box::new(policy),
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(DpoError::Diverged {
                    step,
                    last_good: Box::new(policy),
                });
            }
            let margins: Vec<f64> = stats.iter().map(|s| s.margin).collect();
            let m = summarize_margins(&margins);
            let n = stats.len() as f64;
            log.rows.push(TrainRow {
                step,
                loss,
                margin: m.mean_margin,
                margin_pos_frac: m.positive_fraction,
                chosen_logratio: stats.iter().map(|s| s.chosen_logratio).sum::<f64>() / n,
                rejected_logratio: stats.iter().map(|s| s.rejected_logratio).sum::<f64>() / n,
                kl_estimate: kl,
                probe_margin,
                alt_loss: config
                    .multi
                    .map(|_| stats.iter().filter_map(|s| s.alt_loss).sum::<f64>() / n),
            });
            if let Some(max) = config.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            opt.step(policy.trainable_mut(), &grads);
            step += 1;
        }
    }
    let final_margins = margin_stats(&policy, &views, &refs, config.beta)?;
    Ok(DpoRun {
        policy,
        log,
        final_margins,
    })
}
