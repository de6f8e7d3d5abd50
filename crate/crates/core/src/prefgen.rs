//! Self-generated preference data.
//!
//! For each sampled (image, question) instance the frozen policy answers the
//! clean image (chosen) and one or more augmented copies (rejected), all with
//! greedy decoding. Pairs whose answers coincide carry no preference signal
//! and are dropped. Ground truth is never consulted: this module only sees
//! [`UnlabeledEpisode`]s.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{apply, AugmentError, AugmentSpec};
use crate::policy::{generate, AnswerModel, Policy, PolicyError};
use crate::rng::derive_seed;
use crate::tokenizer::{TokenId, TokenSequence};
use crate::world::{sample_pairs, Question, ToyImage, UnlabeledEpisode, WorldError};

pub const MANIFEST_FORMAT: u32 = 1;
/// Questions drawn per episode; doubles the instance count.
pub const DEFAULT_K_PER_EPISODE: usize = 2;
pub const DEFAULT_MAX_ANSWER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum PrefgenError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("requested {requested} pairs but the corpus yields only {available}")]
    TooManyPairs { requested: usize, available: usize },
    #[error("no negatives given")]
    NoSpecs,
    #[error(
        "all {raw} pairs were filtered out because chosen == rejected under {spec}; \
         use a stronger augmentation"
    )]
    EmptyDataset { raw: usize, spec: String },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PrefgenError>;

/// Where a record's image came from: corpus indices plus a content hash,
/// which is checked whenever the raster is regenerated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub episode: usize,
    pub question_index: usize,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceRecord {
    pub image_ref: ImageRef,
    pub question: Question,
    pub chosen: TokenSequence,
    pub rejected: Vec<TokenSequence>,
    /// One spec per rejected answer, with the seed actually used.
    pub augment: Vec<AugmentSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    image_ref: ImageRef,
    question_tokens: Vec<TokenId>,
    chosen_tokens: TokenSequence,
    rejected_tokens: Vec<TokenSequence>,
    augment: Vec<AugmentSpec>,
}

/// Everything needed to regenerate a dataset bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: u32,
    pub seed: u64,
    pub n_pairs: usize,
    pub k_per_episode: usize,
    pub max_answer_len: usize,
    /// Augmentation templates; per-record seeds are derived from `seed`.
    pub specs: Vec<AugmentSpec>,
    pub policy_hash: String,
    pub corpus_hash: String,
    /// M: instances before filtering.
    pub raw_count: usize,
    /// N_d: records kept.
    pub kept_count: usize,
    /// SHA-256 of the JSONL export.
    pub dataset_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub records: Vec<PreferenceRecord>,
    pub raw_count: usize,
    pub manifest: Option<DatasetManifest>,
}

impl PreferenceDataset {
    pub fn kept_count(&self) -> usize {
        self.records.len()
    }

    /// N_d / M; zero for an empty input.
    pub fn retention(&self) -> f64 {
        if self.raw_count == 0 {
            0.0
        } else {
            self.kept_count() as f64 / self.raw_count as f64
        }
    }

    pub fn mean_rejected(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.rejected.len()).sum::<usize>() as f64 / self.records.len() as f64
    }

    pub fn write_jsonl<W: Write>(&self, out: W) -> Result<()> {
        write_records(&self.records, out)
    }

    pub fn jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        buf
    }
}

fn write_records<W: Write>(records: &[PreferenceRecord], mut out: W) -> Result<()> {
    for r in records {
        let line = RecordLine {
            image_ref: r.image_ref.clone(),
            question_tokens: r.question.text_tokens.clone(),
            chosen_tokens: r.chosen.clone(),
            rejected_tokens: r.rejected.clone(),
            augment: r.augment.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(|source| PrefgenError::Parse { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSONL export, resolving questions against `corpus` and checking
/// image hashes and the chosen != rejected invariant on every line.
pub fn read_jsonl<R: BufRead>(input: R, corpus: &[UnlabeledEpisode]) -> Result<Vec<PreferenceRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine =
            serde_json::from_str(&line).map_err(|source| PrefgenError::Parse { line: line_no, source })?;
        let bad = |message: String| PrefgenError::Record { line: line_no, message };
        let ep = corpus
            .get(rec.image_ref.episode)
            .ok_or_else(|| bad(format!("episode {} not in corpus", rec.image_ref.episode)))?;
        let question = ep
            .questions
            .get(rec.image_ref.question_index)
            .ok_or_else(|| bad(format!("question {} not in episode", rec.image_ref.question_index)))?;
        if question.text_tokens != rec.question_tokens {
            return Err(bad("question tokens differ from corpus".into()));
        }
        if ep.image.content_hash() != rec.image_ref.hash {
            return Err(bad("image hash differs from corpus".into()));
        }
        if rec.rejected_tokens.is_empty() || rec.rejected_tokens.len() != rec.augment.len() {
            return Err(bad(
                "rejected and augment lists must be non-empty and equally long".into()
            ));
        }
        if rec.rejected_tokens.contains(&rec.chosen_tokens) {
            return Err(bad("rejected answer equals chosen".into()));
        }
        out.push(PreferenceRecord {
            image_ref: rec.image_ref,
            question: question.clone(),
            chosen: rec.chosen_tokens,
            rejected: rec.rejected_tokens,
            augment: rec.augment,
        });
    }
    Ok(out)
}

/// Image of a record, regenerated from the corpus.
pub fn record_image<'a>(record: &PreferenceRecord, corpus: &'a [UnlabeledEpisode]) -> Option<&'a ToyImage> {
    corpus.get(record.image_ref.episode).map(|ep| &ep.image)
}

/// Hash over every image and question of a corpus.
pub fn corpus_hash(corpus: &[UnlabeledEpisode]) -> String {
    let mut h = Sha256::new();
    for ep in corpus {
        h.update(ep.image.content_hash().as_bytes());
        for q in &ep.questions {
            for t in &q.text_tokens {
                h.update(t.to_le_bytes());
            }
            h.update([0xff]);
        }
    }
    hex::encode(h.finalize())
}

/// Seed of the `j`-th augmentation of record `index`.
pub fn record_seed(seed: u64, index: usize, j: usize) -> u64 {
    derive_seed(derive_seed(seed, index as u64), j as u64)
}

/// Greedy answers on the clean and the augmented image.
pub fn generate_pair<M: AnswerModel + ?Sized>(
    model: &M,
    image: &ToyImage,
    question: &Question,
    spec: &AugmentSpec,
    max_len: usize,
) -> Result<(TokenSequence, TokenSequence)> {
    let chosen = generate(model, image, question, 0.0, max_len, 0)?;
    let augmented = apply(spec, image)?;
    let rejected = generate(model, &augmented, question, 0.0, max_len, 0)?;
    Ok((chosen, rejected))
}

/// Drops every rejected answer equal to its chosen one, then every record
/// left without rejected answers.
pub fn filter_equal(pairs: Vec<PreferenceRecord>) -> PreferenceDataset {
    let raw_count = pairs.len();
    let records = pairs
        .into_iter()
        .filter_map(|mut r| {
            let (rejected, augment): (Vec<_>, Vec<_>) = r
                .rejected
                .into_iter()
                .zip(r.augment)
                .filter(|(rej, _)| *rej != r.chosen)
                .unzip();
            r.rejected = rejected;
            r.augment = augment;
            (!r.rejected.is_empty()).then_some(r)
        })
        .collect();
    PreferenceDataset {
        records,
        raw_count,
        manifest: None,
    }
}

/// Unfiltered candidates: one chosen answer and one rejected answer per spec
/// for each of the first `n_pairs` sampled instances.
pub fn generate_candidates<M: AnswerModel + ?Sized>(
    model: &M,
    corpus: &[UnlabeledEpisode],
    specs: &[AugmentSpec],
    n_pairs: usize,
    k_per_episode: usize,
    max_answer_len: usize,
    seed: u64,
) -> Result<Vec<PreferenceRecord>> {
    if specs.is_empty() {
        return Err(PrefgenError::NoSpecs);
    }
    let mut pairs = sample_pairs(corpus, k_per_episode, seed)?;
    if n_pairs > pairs.len() {
        return Err(PrefgenError::TooManyPairs {
            requested: n_pairs,
            available: pairs.len(),
        });
    }
    pairs.truncate(n_pairs);
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let chosen = generate(model, pair.image, pair.question, 0.0, max_answer_len, 0)?;
            let mut rejected = Vec::with_capacity(specs.len());
            let mut augment = Vec::with_capacity(specs.len());
            for (j, template) in specs.iter().enumerate() {
                let spec = template.with_seed(record_seed(seed, i, j));
                let image = apply(&spec, pair.image)?;
                rejected.push(generate(model, &image, pair.question, 0.0, max_answer_len, 0)?);
                augment.push(spec);
            }
            Ok(PreferenceRecord {
                image_ref: ImageRef {
                    episode: pair.episode,
                    question_index: pair.question_index,
                    hash: pair.image.content_hash(),
                },
                question: pair.question.clone(),
                chosen,
                rejected,
                augment,
            })
        })
        .collect()
}

/// Options shared by the dataset builders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrefgenConfig {
    /// M; `None` takes every sampled instance.
    pub n_pairs: Option<usize>,
    pub k_per_episode: usize,
    pub max_answer_len: usize,
    pub seed: u64,
}

impl Default for PrefgenConfig {
    fn default() -> Self {
        Self {
            n_pairs: None,
            k_per_episode: DEFAULT_K_PER_EPISODE,
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
            seed: 0,
        }
    }
}

/// Multi-negative dataset: each record keeps every rejected answer that
/// differs from its chosen one. Records without survivors are dropped; an
/// empty result is not an error here.
pub fn build_multi_negative(
    corpus: &[UnlabeledEpisode],
    policy: &Policy,
    specs: &[AugmentSpec],
    config: &PrefgenConfig,
) -> Result<PreferenceDataset> {
    let n_pairs = config.n_pairs.unwrap_or(corpus.len() * config.k_per_episode);
    let candidates = generate_candidates(
        policy,
        corpus,
        specs,
        n_pairs,
        config.k_per_episode,
        config.max_answer_len,
        config.seed,
    )?;
    let mut dataset = filter_equal(candidates);
    dataset.manifest = Some(DatasetManifest {
        format: MANIFEST_FORMAT,
        seed: config.seed,
        n_pairs,
        k_per_episode: config.k_per_episode,
        max_answer_len: config.max_answer_len,
        specs: specs.to_vec(),
        policy_hash: policy.content_hash(),
        corpus_hash: corpus_hash(corpus),
        raw_count: dataset.raw_count,
        kept_count: dataset.kept_count(),
        dataset_hash: hex::encode(Sha256::digest(dataset.jsonl_bytes())),
    });
    Ok(dataset)
}

/// Standard single-negative dataset; errors if filtering leaves nothing.
pub fn build_dataset(
    corpus: &[UnlabeledEpisode],
    policy: &Policy,
    spec: &AugmentSpec,
    config: &PrefgenConfig,
) -> Result<PreferenceDataset> {
    let dataset = build_multi_negative(corpus, policy, std::slice::from_ref(spec), config)?;
    if dataset.records.is_empty() {
        return Err(PrefgenError::EmptyDataset {
            raw: dataset.raw_count,
            spec: spec.label(),
        });
    }
    Ok(dataset)
}

/// Rebuilds a dataset from its manifest and checks that the result matches
/// the recorded counts and hash.
pub fn replay(manifest: &DatasetManifest, corpus: &[UnlabeledEpisode], policy: &Policy) -> Result<PreferenceDataset> {
    if manifest.format != MANIFEST_FORMAT {
        return Err(PrefgenError::Manifest(format!(
            "unsupported format {}",
            manifest.format
        )));
    }
    if manifest.corpus_hash != corpus_hash(corpus) {
        return Err(PrefgenError::Manifest("corpus hash mismatch".into()));
    }
    if manifest.policy_hash != policy.content_hash() {
        return Err(PrefgenError::Manifest("policy hash mismatch".into()));
    }
    let config = PrefgenConfig {
        n_pairs: Some(manifest.n_pairs),
        k_per_episode: manifest.k_per_episode,
        max_answer_len: manifest.max_answer_len,
        seed: manifest.seed,
    };
    let dataset = build_multi_negative(corpus, policy, &manifest.specs, &config)?;
    if dataset.manifest.as_ref() != Some(manifest) {
        return Err(PrefgenError::Manifest("replayed dataset differs from manifest".into()));
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentSpec;
    use crate::world::{generate_corpus, strip_truth, WorldConfig};

    fn seq(content: &[TokenId]) -> TokenSequence {
        TokenSequence::from_content(content)
    }

    fn record(chosen: &[TokenId], rejected: &[&[TokenId]]) -> PreferenceRecord {
        let cfg = WorldConfig::default();
        let tok = cfg.tokenizer().unwrap();
        let ep = generate_corpus(0, 1, &cfg).unwrap().remove(0);
        PreferenceRecord {
            image_ref: ImageRef {
                episode: 0,
                question_index: 0,
                hash: ep.image.content_hash(),
            },
            question: Question::new(ep.questions[0].kind, &tok).unwrap(),
            chosen: seq(chosen),
            rejected: rejected.iter().map(|r| seq(r)).collect(),
            augment: rejected.iter().map(|_| AugmentSpec::identity()).collect(),
        }
    }

    #[test]
    fn filter_counts_known_pattern() {
        let pairs = vec![
            record(&[20], &[&[20]]),
            record(&[20], &[&[21]]),
            record(&[21, 22], &[&[21, 22]]),
            record(&[21, 22], &[&[22, 21]]),
        ];
        let ds = filter_equal(pairs);
        assert_eq!(ds.raw_count, 4);
        assert_eq!(ds.kept_count(), 2);
        assert!((ds.retention() - 0.5).abs() < 1e-15);
        assert!(ds.records.iter().all(|r| r.rejected.iter().all(|x| *x != r.chosen)));
    }

    #[test]
    fn multi_filter_drops_only_equal_negatives() {
        let ds = filter_equal(vec![record(&[20], &[&[20], &[21]]), record(&[20], &[&[20], &[20]])]);
        assert_eq!(ds.kept_count(), 1);
        assert_eq!(ds.records[0].rejected, vec![seq(&[21])]);
        assert_eq!(ds.records[0].augment.len(), 1);
    }

    #[test]
    fn identity_yields_empty_dataset_error() {
        let cfg = WorldConfig::default();
        let corpus = strip_truth(&generate_corpus(3, 4, &cfg).unwrap());
        let policy = Policy::new(crate::policy::PolicyConfig {
            d_model: 16,
            ..Default::default()
        })
        .unwrap();
        let config = PrefgenConfig::default();
        let err = build_dataset(&corpus, &policy, &AugmentSpec::identity(), &config).unwrap_err();
        assert!(matches!(err, PrefgenError::EmptyDataset { raw: 8, .. }), "{err}");
        let too_many = PrefgenConfig {
            n_pairs: Some(9),
            ..config
        };
        assert!(matches!(
            build_dataset(&corpus, &policy, &AugmentSpec::identity(), &too_many),
            Err(PrefgenError::TooManyPairs {
                requested: 9,
                available: 8
            })
        ));
    }

    #[test]
    fn jsonl_roundtrip_and_corruption() {
        let cfg = WorldConfig::default();
        let corpus = strip_truth(&generate_corpus(0, 1, &cfg).unwrap());
        let ds = filter_equal(vec![record(&[20], &[&[21]]), record(&[20, 21], &[&[22]])]);
        let bytes = ds.jsonl_bytes();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"chosen_tokens\""));
        let back = read_jsonl(&bytes[..], &corpus).unwrap();
        assert_eq!(back, ds.records);

        let mut lines: Vec<&str> = text.lines().collect();
        lines[1] = "{not json";
        let err = read_jsonl(lines.join("\n").as_bytes(), &corpus).unwrap_err();
        assert!(matches!(err, PrefgenError::Parse { line: 2, .. }));

        let equal = filter_equal(vec![record(&[20], &[&[21]])]).jsonl_bytes();
        let tampered = String::from_utf8(equal)
            .unwrap()
            .replace("\"rejected_tokens\":[[21,2]]", "\"rejected_tokens\":[[20,2]]");
        assert!(matches!(
            read_jsonl(tampered.as_bytes(), &corpus),
            Err(PrefgenError::Record { line: 1, .. })
        ));
    }
}
