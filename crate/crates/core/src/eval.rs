//! Evaluation against microworld ground truth.
//!
//! Answers are graded by a deterministic 0-10 rubric (token edit distance
//! with a format cap) instead of a model judge. [`Judge`] is the seam for
//! plugging in an external grader.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply, AugmentError, AugmentSpec};
use crate::policy::{generate, AnswerModel, PolicyError};
use crate::rng::derive_seed;
use crate::tokenizer::{TokenId, TokenSequence, Tokenizer};
use crate::world::{Episode, Question, Template, ToyImage};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("temperature {0} outside [0, 2]")]
    Temperature(f64),
    #[error("n_samples must be at least 1")]
    NoSamples,
    #[error("judge: {0}")]
    Judge(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Highest score an answer outside its template's format can get.
pub const FORMAT_CAP: u8 = 3;

/// One graded (image, question, truth) instance.
#[derive(Debug, Clone, Copy)]
pub struct EvalItem<'a> {
    pub image: &'a ToyImage,
    pub question: &'a Question,
    pub truth: &'a TokenSequence,
}

/// Every question of every episode, in order.
pub fn eval_items(episodes: &[Episode]) -> Vec<EvalItem<'_>> {
    episodes
        .iter()
        .flat_map(|ep| {
            ep.questions
                .iter()
                .zip(&ep.truth)
                .map(move |(question, truth)| EvalItem {
                    image: &ep.image,
                    question,
                    truth,
                })
        })
        .collect()
}

fn edit_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Whether `content` has the surface form the question's template asks for.
pub fn on_template(content: &[TokenId], question: &Question, tok: &Tokenizer) -> bool {
    let first_glyph = tok.glyph(1).expect("alphabet has a first glyph");
    let is_glyph = |t: &TokenId| *t >= first_glyph && (*t as usize) < tok.vocab_size();
    let is_digit = |t: &TokenId| (tok.digit(0)..=tok.digit(9)).contains(t);
    let word = |w: &str| tok.word(w).expect("template word");
    match question.template() {
        Template::ReadRow | Template::ReadCol => {
            content == [word("blank")] || (!content.is_empty() && content.iter().all(is_glyph))
        }
        Template::CountGlyph => {
            !content.is_empty()
                && content.len() <= 3
                && content.iter().all(is_digit)
                && (content.len() == 1 || content[0] != tok.digit(0))
        }
        Template::GlyphAt => content.len() == 1 && (content[0] == word("blank") || is_glyph(&content[0])),
        Template::ExistsGlyph => content == [word("yes")] || content == [word("no")],
    }
}

/// `round(10 * (1 - d / max(|answer|, |reference|)))` over content tokens,
/// capped at [`FORMAT_CAP`] when the answer is off-template.
pub fn judge_score(answer: &TokenSequence, reference: &TokenSequence, question: &Question, tok: &Tokenizer) -> u8 {
    let (a, r) = (answer.content(), reference.content());
    if a.is_empty() {
        return 0;
    }
    let norm = a.len().max(r.len());
    let score = (10.0 * (1.0 - edit_distance(a, r) as f64 / norm as f64)).round() as u8;
    if on_template(a, question, tok) {
        score
    } else {
        score.min(FORMAT_CAP)
    }
}

/// What an external grader receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub question: String,
    pub answer: String,
    /// Ground truth or a second answer to compare against.
    pub reference: String,
}

impl JudgeRequest {
    pub fn new(
        question: &Question,
        answer: &TokenSequence,
        reference: &TokenSequence,
        tok: &Tokenizer,
    ) -> Result<Self> {
        let text = |ids: &[TokenId]| tok.decode(ids).map_err(|e| EvalError::Judge(e.to_string()));
        Ok(Self {
            question: text(&question.text_tokens)?,
            answer: text(answer.content())?,
            reference: text(reference.content())?,
        })
    }
}

/// Grades an answer on the 0-10 scale.
///
/// A remote implementation would send a [`JudgeRequest`] with a prompt along
/// the lines of: "Rate from 0 to 10 how well the answer matches the
/// reference for this question; reply with the integer only."
pub trait Judge: Sync {
    fn score(&self, question: &Question, answer: &TokenSequence, reference: &TokenSequence) -> Result<u8>;
}

/// The built-in rubric.
#[derive(Debug, Clone)]
pub struct RubricJudge {
    pub tokenizer: Tokenizer,
}

impl Judge for RubricJudge {
    fn score(&self, question: &Question, answer: &TokenSequence, reference: &TokenSequence) -> Result<u8> {
        Ok(judge_score(answer, reference, question, &self.tokenizer))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub augment: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Template name to `(correct, total)`.
    pub per_template: BTreeMap<String, (usize, usize)>,
}

/// Input of item `index` under `spec`; the augmentation seed is derived from
/// the spec's seed and the item index.
fn transformed(spec: &AugmentSpec, image: &ToyImage, index: usize) -> Result<ToyImage> {
    Ok(apply(&spec.with_seed(derive_seed(spec.seed, index as u64)), image)?)
}

/// Greedy answers to every item, on `spec`-transformed images.
pub fn greedy_answers<M: AnswerModel + ?Sized>(
    model: &M,
    items: &[EvalItem<'_>],
    spec: &AugmentSpec,
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let image = transformed(spec, item.image, i)?;
            Ok(generate(model, &image, item.question, 0.0, max_len, 0)?)
        })
        .collect()
}

/// Exact-match fraction of greedy answers on `spec`-transformed inputs.
pub fn accuracy<M: AnswerModel + ?Sized>(
    model: &M,
    items: &[EvalItem<'_>],
    spec: &AugmentSpec,
    max_len: usize,
) -> Result<AccuracyReport> {
    let answers = greedy_answers(model, items, spec, max_len)?;
    let mut per_template: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (item, answer) in items.iter().zip(&answers) {
        let entry = per_template
            .entry(item.question.template().name().to_string())
            .or_default();
        entry.1 += 1;
        if answer == item.truth {
            entry.0 += 1;
            correct += 1;
        }
    }
    let total = items.len();
    Ok(AccuracyReport {
        augment: spec.label(),
        correct,
        total,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        per_template,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub temperature: f64,
    /// Mean score of sampled answers against the truth.
    pub q_consistency: f64,
    /// Mean score of sampled answers against the same model's greedy answer.
    pub a_consistency: f64,
    pub n_samples: usize,
}

/// Sampling-robustness probe: `n_samples` answers per item at each
/// temperature, scored against the truth and against the greedy answer.
pub fn consistency_probe<M: AnswerModel + ?Sized>(
    model: &M,
    items: &[EvalItem<'_>],
    temperatures: &[f64],
    n_samples: usize,
    max_len: usize,
    seed: u64,
    tok: &Tokenizer,
) -> Result<Vec<ConsistencyReport>> {
    if n_samples == 0 {
        return Err(EvalError::NoSamples);
    }
    if let Some(&t) = temperatures.iter().find(|t| !(0.0..=2.0).contains(*t)) {
        return Err(EvalError::Temperature(t));
    }
    let greedy = greedy_answers(model, items, &AugmentSpec::identity(), max_len)?;
    temperatures
        .iter()
        .enumerate()
        .map(|(ti, &t)| {
            let scores: Vec<(u32, u32)> = items
                .par_iter()
                .enumerate()
                .map(|(i, item)| {
                    let mut q = 0u32;
                    let mut a = 0u32;
                    for s in 0..n_samples {
                        let key = derive_seed(derive_seed(seed, ti as u64), (i * n_samples + s) as u64);
                        let y = generate(model, item.image, item.question, t, max_len, key)?;
                        q += judge_score(&y, item.truth, item.question, tok) as u32;
                        a += judge_score(&y, &greedy[i], item.question, tok) as u32;
                    }
                    Ok((q, a))
                })
                .collect::<Result<_>>()?;
            let n = (items.len() * n_samples).max(1) as f64;
            Ok(ConsistencyReport {
                temperature: t,
                q_consistency: scores.iter().map(|s| s.0 as f64).sum::<f64>() / n,
                a_consistency: scores.iter().map(|s| s.1 as f64).sum::<f64>() / n,
                n_samples,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Win,
    Lose,
    /// Same nonzero score on both sides.
    Equal,
    /// Both answers scored zero.
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchItem {
    pub score_a: u8,
    pub score_b: u8,
    pub outcome: Outcome,
    pub len_a: usize,
    pub len_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub items: Vec<MatchItem>,
    pub win: usize,
    pub lose: usize,
    pub equal: usize,
    pub discarded: usize,
    /// Mean answer length in content tokens.
    pub mean_len_a: f64,
    pub mean_len_b: f64,
}

impl MatchResult {
    /// Share of decided items won by `a`; zero when nothing was decided.
    pub fn win_rate(&self) -> f64 {
        let decided = self.win + self.lose;
        if decided == 0 {
            0.0
        } else {
            self.win as f64 / decided as f64
        }
    }

    pub fn from_scores(items: Vec<MatchItem>) -> Self {
        let count = |o: Outcome| items.iter().filter(|i| i.outcome == o).count();
        let n = items.len().max(1) as f64;
        Self {
            win: count(Outcome::Win),
            lose: count(Outcome::Lose),
            equal: count(Outcome::Equal),
            discarded: count(Outcome::Discarded),
            mean_len_a: items.iter().map(|i| i.len_a).sum::<usize>() as f64 / n,
            mean_len_b: items.iter().map(|i| i.len_b).sum::<usize>() as f64 / n,
            items,
        }
    }
}

pub fn outcome(score_a: u8, score_b: u8) -> Outcome {
    match (score_a, score_b) {
        (0, 0) => Outcome::Discarded,
        (a, b) if a > b => Outcome::Win,
        (a, b) if a < b => Outcome::Lose,
        _ => Outcome::Equal,
    }
}

/// Head-to-head comparison of greedy answers on clean inputs.
pub fn pairwise_match<A: AnswerModel + ?Sized, B: AnswerModel + ?Sized>(
    model_a: &A,
    model_b: &B,
    items: &[EvalItem<'_>],
    max_len: usize,
    tok: &Tokenizer,
) -> Result<MatchResult> {
    let clean = AugmentSpec::identity();
    let answers_a = greedy_answers(model_a, items, &clean, max_len)?;
    let answers_b = greedy_answers(model_b, items, &clean, max_len)?;
    let scored = items
        .iter()
        .zip(answers_a.iter().zip(&answers_b))
        .map(|(item, (a, b))| {
            let score_a = judge_score(a, item.truth, item.question, tok);
            let score_b = judge_score(b, item.truth, item.question, tok);
            MatchItem {
                score_a,
                score_b,
                outcome: outcome(score_a, score_b),
                len_a: a.content().len(),
                len_b: b.content().len(),
            }
        })
        .collect();
    Ok(MatchResult::from_scores(scored))
}
