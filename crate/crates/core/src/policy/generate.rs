//! Greedy and temperature-sampled answer generation.

use rand::Rng as _;

use super::{BoundParams, Policy, PolicyError, PrefixState, Result};
use crate::rng::rng;
use crate::tensor::Graph;
use crate::tokenizer::{TokenId, TokenSequence, EOS};
use crate::world::{Question, ToyImage};

/// Anything that yields next-token logits for an answer prefix.
///
/// `begin` does the per-(image, question) work once; `next_logits` is then
/// called with growing answer prefixes.
pub trait AnswerModel: Sync {
    type Session;

    fn vocab_size(&self) -> usize;

    fn begin(&self, image: &ToyImage, question: &Question) -> Result<Self::Session>;

    fn next_logits(&self, session: &mut Self::Session, answer_prefix: &[TokenId]) -> Result<Vec<f64>>;
}

pub struct PolicySession {
    graph: Graph,
    bound: BoundParams,
    prefix: PrefixState,
    prompt: Vec<TokenId>,
}

impl AnswerModel for Policy {
    type Session = PolicySession;

    fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    fn begin(&self, image: &ToyImage, question: &Question) -> Result<PolicySession> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph, false)?;
        let prefix = self.encode_context(&mut graph, &bound, image, question)?;
        Ok(PolicySession {
            graph,
            bound,
            prefix,
            prompt: self.prompt_tokens(question),
        })
    }

    fn next_logits(&self, s: &mut PolicySession, answer_prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut text = s.prompt.clone();
        text.extend_from_slice(answer_prefix);
        let logits = self.decode(&mut s.graph, &s.bound, &s.prefix, &text)?;
        let v = self.tokenizer.vocab_size();
        Ok(s.graph.value(logits)[(text.len() - 1) * v..].to_vec())
    }
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Decodes one answer. `temperature == 0` is greedy (ties go to the lowest
/// token id); otherwise tokens are sampled from `softmax(logits / t)` with a
/// generator keyed by `seed`. EOS is forced at position `max_len`.
///
/// The returned sequence carries its log-probability under the untempered
/// model.
pub fn generate<M: AnswerModel + ?Sized>(
    model: &M,
    image: &ToyImage,
    question: &Question,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<TokenSequence> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(PolicyError::Config(format!(
            "temperature must be finite and >= 0, got {temperature}"
        )));
    }
    if max_len == 0 {
        return Err(PolicyError::Config("max_len must be at least 1".into()));
    }
    let mut session = model.begin(image, question)?;
    let mut sampler = rng(seed);
    let mut tokens: Vec<TokenId> = Vec::with_capacity(max_len);
    let mut logprob = 0.0;
    for step in 0..max_len {
        let logits = model.next_logits(&mut session, &tokens)?;
        let logp = log_softmax(&logits);
        let next = if step + 1 == max_len {
            EOS as usize
        } else if temperature == 0.0 {
            argmax(&logits)
        } else {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
            let u: f64 = sampler.random();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        logprob += logp[next];
        tokens.push(next as TokenId);
        if next as TokenId == EOS {
            break;
        }
    }
    Ok(TokenSequence::new(tokens)
        .expect("loop ends on EOS")
        .with_logprob(logprob))
}
