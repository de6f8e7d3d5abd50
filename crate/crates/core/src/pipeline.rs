//! Reproducible end-to-end runs.
//!
//! A run directory holds the resolved config plus every artifact of the five
//! stages: corpora, SFT checkpoint, preference JSONL and manifest, DPO
//! checkpoint and train log, metrics and charts. Each stage reads only what
//! earlier stages wrote, so stages can also be run one at a time.
//!
//! Everything except `timings.json` is a pure function of the config.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentSpec;
use crate::dpo::{kl_diagnostic, train_dpo, DpoConfig, KlEstimate, MarginStats, TrainLog, TrainRow};
use crate::eval::{accuracy, consistency_probe, eval_items, pairwise_match, AccuracyReport, ConsistencyReport};
use crate::optim::AdamConfig;
use crate::policy::{load_checkpoint, save_checkpoint, sft_train, LoraConfig, Policy, PolicyConfig, SftConfig};
use crate::prefgen::{
    build_dataset, build_multi_negative, read_jsonl, DatasetManifest, PreferenceDataset, PrefgenConfig,
    DEFAULT_MAX_ANSWER_LEN,
};
use crate::rng::derive_seed;
use crate::svg::{bar_chart, line_chart, Series};
use crate::world::{
    generate_corpus, read_corpus_jsonl, read_unlabeled_jsonl, strip_truth, write_corpus_jsonl, write_unlabeled_jsonl,
    Episode, UnlabeledEpisode, WorldConfig,
};

/// Pipeline stage; each failing stage maps to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Config,
    GenCorpus,
    Sft,
    GenPrefs,
    Dpo,
    Eval,
    Sweep,
    Inspect,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::GenCorpus => "gen-corpus",
            Stage::Sft => "sft",
            Stage::GenPrefs => "gen-prefs",
            Stage::Dpo => "dpo",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Inspect => "inspect",
        }
    }

    /// Process exit code reported when this stage fails.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::GenCorpus => 10,
            Stage::Sft => 11,
            Stage::GenPrefs => 12,
            Stage::Dpo => 13,
            Stage::Eval => 14,
            Stage::Sweep => 15,
            Stage::Inspect => 16,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
#[error("stage {stage} failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl PipelineError {
    pub fn new(stage: Stage, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Self {
            stage,
            source: source.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

trait StageContext<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T, E: Into<Box<dyn std::error::Error + Send + Sync>>> StageContext<T> for std::result::Result<T, E> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|e| PipelineError::new(stage, e))
    }
}

/// Corpus sizes and seeds. The three corpora are disjoint draws: labeled SFT
/// data, an unlabeled preference source and a held-out evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub sft_episodes: usize,
    pub pref_episodes: usize,
    pub eval_episodes: usize,
    pub sft_seed: u64,
    pub pref_seed: u64,
    pub eval_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sft_episodes: 2000,
            pref_episodes: 1000,
            eval_episodes: 200,
            sft_seed: 1,
            pref_seed: 2,
            eval_seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub max_answer_len: usize,
    /// Distortion for the clean-versus-distorted accuracy check.
    pub distorted: AugmentSpec,
    pub temperatures: Vec<f64>,
    pub consistency_samples: usize,
    /// Consistency sampling seeds; one report per seed and temperature.
    pub consistency_seeds: Vec<u64>,
    /// World used for the held-out set; `None` reuses the training world.
    pub world: Option<WorldConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
            distorted: AugmentSpec::diffusion_strong(7),
            temperatures: vec![0.2, 0.4, 0.5, 0.7, 0.9],
            consistency_samples: 1,
            consistency_seeds: vec![0, 1, 2, 3, 4],
            world: None,
        }
    }
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub corpus: CorpusConfig,
    pub policy: PolicyConfig,
    pub sft: SftConfig,
    /// One spec gives the standard dataset; several give multi-negative
    /// records (which needs `dpo.multi`).
    pub augment: Vec<AugmentSpec>,
    pub prefgen: PrefgenConfig,
    pub lora: LoraConfig,
    pub dpo: DpoConfig,
    pub eval: EvalConfig,
}

/// The pinned baseline. Component defaults are generic; the values set here
/// were chosen so the microworld shows the effects the pipeline is meant to
/// measure:
///
/// - density 0.25 and a question mix weighted towards `exists_glyph` keep
///   the retention ratio at t=800 inside [0.3, 0.7]. Under heavy noise only
///   yes/no and small-count answers still match the clean answer by chance,
///   so that weight is what controls how many pairs get filtered;
/// - a longer constant-rate SFT reaches the clean accuracy floor;
/// - DPO at 1e-4: the generic 1e-3 overshoots and trades clean accuracy for
///   margin on these pairs;
/// - the held-out world balances `exists_glyph` answers so accuracy on that
///   template is not just the majority class.
impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldConfig {
            density: 0.25,
            template_weights: [1.0, 1.0, 1.0, 1.0, 4.0],
            ..WorldConfig::default()
        };
        Self {
            policy: PolicyConfig {
                grid_width: world.width,
                grid_height: world.height,
                cell_size: world.cell_size,
                glyphs: world.glyphs,
                ..PolicyConfig::default()
            },
            eval: EvalConfig {
                consistency_samples: 4,
                world: Some(WorldConfig {
                    balanced_exists: true,
                    ..world.clone()
                }),
                ..EvalConfig::default()
            },
            world,
            corpus: CorpusConfig::default(),
            sft: SftConfig {
                steps: 8000,
                adam: AdamConfig {
                    learning_rate: 1e-3,
                    ..AdamConfig::default()
                },
                cosine_decay: false,
                ..SftConfig::default()
            },
            augment: vec![AugmentSpec::diffusion_strong(0)],
            prefgen: PrefgenConfig::default(),
            lora: LoraConfig::with_rank(8),
            dpo: DpoConfig {
                learning_rate: 1e-4,
                ..DpoConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).at(Stage::Config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::new(Stage::Config, format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reseeds every stage from one master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        let s = |i| derive_seed(seed, i);
        self.corpus.sft_seed = s(0);
        self.corpus.pref_seed = s(1);
        self.corpus.eval_seed = s(2);
        self.policy.init_seed = s(3);
        self.sft.seed = s(4);
        self.prefgen.seed = s(5);
        self.lora.seed = s(6);
        self.dpo.seed = s(7);
        self
    }

    /// Replaces the diffusion step of every augmentation spec.
    pub fn with_noise_step(mut self, step: usize) -> Self {
        for spec in &mut self.augment {
            spec.params.noise_step = Some(step);
        }
        self
    }

    pub fn eval_world(&self) -> &WorldConfig {
        self.eval.world.as_ref().unwrap_or(&self.world)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PipelineError::new(Stage::Config, msg));
        self.world.validate().at(Stage::Config)?;
        self.eval_world().validate().at(Stage::Config)?;
        self.policy.validate().at(Stage::Config)?;
        self.dpo.validate().at(Stage::Config)?;
        let w = &self.world;
        let p = &self.policy;
        if (w.width, w.height, w.cell_size, w.glyphs) != (p.grid_width, p.grid_height, p.cell_size, p.glyphs) {
            return bad("policy grid, cell size and glyph count must match the world".into());
        }
        let e = self.eval_world();
        if (e.width, e.height, e.cell_size, e.glyphs) != (w.width, w.height, w.cell_size, w.glyphs) {
            return bad("evaluation world must share the training world's geometry and glyphs".into());
        }
        if self.augment.is_empty() {
            return bad("at least one augmentation spec is required".into());
        }
        if self.augment.len() > 1 && self.dpo.multi.is_none() {
            return bad("several augmentation specs need dpo.multi to be set".into());
        }
        if self.corpus.sft_episodes == 0 || self.corpus.pref_episodes == 0 || self.corpus.eval_episodes == 0 {
            return bad("corpus sizes must be at least 1".into());
        }
        Ok(())
    }
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn sft_corpus(&self) -> PathBuf {
        self.root.join("corpus/sft.jsonl")
    }
    pub fn pref_corpus(&self) -> PathBuf {
        self.root.join("corpus/pref.jsonl")
    }
    pub fn eval_corpus(&self) -> PathBuf {
        self.root.join("corpus/eval.jsonl")
    }
    pub fn sft_policy(&self) -> PathBuf {
        self.root.join("sft/policy.json")
    }
    pub fn sft_report(&self) -> PathBuf {
        self.root.join("sft/report.json")
    }
    pub fn prefs(&self) -> PathBuf {
        self.root.join("prefs/dataset.jsonl")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("prefs/manifest.json")
    }
    pub fn dpo_policy(&self) -> PathBuf {
        self.root.join("dpo/policy.json")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("dpo/train_log.csv")
    }
    pub fn dpo_report(&self) -> PathBuf {
        self.root.join("dpo/report.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("eval/metrics.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("eval/summary.md")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
}

fn create_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir),
        _ => Ok(()),
    }
}

fn write_bytes(path: &Path, bytes: &[u8], stage: Stage) -> Result<()> {
    create_parent(path).at(stage)?;
    fs::write(path, bytes).map_err(|e| PipelineError::new(stage, format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T, stage: Stage) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).at(stage)?;
    text.push('\n');
    write_bytes(path, text.as_bytes(), stage)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: Stage) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::new(stage, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::new(stage, format!("{}: {e}", path.display())))
}

fn open(path: &Path, stage: Stage) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| PipelineError::new(stage, format!("{}: {e} (run the earlier stages first)", path.display())))
}

pub fn load_labeled(path: &Path, stage: Stage) -> Result<Vec<Episode>> {
    read_corpus_jsonl(open(path, stage)?).at(stage)
}

pub fn load_unlabeled(path: &Path, stage: Stage) -> Result<Vec<UnlabeledEpisode>> {
    read_unlabeled_jsonl(open(path, stage)?).at(stage)
}

/// Writes the three corpora.
pub fn gen_corpus(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let stage = Stage::GenCorpus;
    let c = &cfg.corpus;
    let sft = generate_corpus(c.sft_seed, c.sft_episodes, &cfg.world).at(stage)?;
    let pref = strip_truth(&generate_corpus(c.pref_seed, c.pref_episodes, &cfg.world).at(stage)?);
    let eval = generate_corpus(c.eval_seed, c.eval_episodes, cfg.eval_world()).at(stage)?;
    let mut buf = Vec::new();
    write_corpus_jsonl(&sft, &mut buf).at(stage)?;
    write_bytes(&dir.sft_corpus(), &buf, stage)?;
    buf.clear();
    write_unlabeled_jsonl(&pref, &mut buf).at(stage)?;
    write_bytes(&dir.pref_corpus(), &buf, stage)?;
    buf.clear();
    write_corpus_jsonl(&eval, &mut buf).at(stage)?;
    write_bytes(&dir.eval_corpus(), &buf, stage)
}

/// Trains the SFT checkpoint on the labeled corpus.
pub fn sft(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let stage = Stage::Sft;
    let corpus = load_labeled(&dir.sft_corpus(), stage)?;
    let init = Policy::new(cfg.policy.clone()).at(stage)?;
    let (policy, report) = sft_train(&init, &corpus, &cfg.sft).at(stage)?;
    create_parent(&dir.sft_policy()).at(stage)?;
    save_checkpoint(&policy, &dir.sft_policy()).at(stage)?;
    write_json(&dir.sft_report(), &report, stage)
}

/// Builds the preference dataset from the unlabeled corpus.
pub fn gen_prefs(cfg: &RunConfig, dir: &RunDir) -> Result<PreferenceDataset> {
    let stage = Stage::GenPrefs;
    let corpus = load_unlabeled(&dir.pref_corpus(), stage)?;
    let policy = load_checkpoint(&dir.sft_policy()).at(stage)?;
    let dataset = if cfg.augment.len() == 1 {
        build_dataset(&corpus, &policy, &cfg.augment[0], &cfg.prefgen).at(stage)?
    } else {
        let ds = build_multi_negative(&corpus, &policy, &cfg.augment, &cfg.prefgen).at(stage)?;
        if ds.records.is_empty() {
            return Err(PipelineError::new(
                stage,
                format!(
                    "all {} pairs were filtered out; use a stronger augmentation",
                    ds.raw_count
                ),
            ));
        }
        ds
    };
    write_bytes(&dir.prefs(), &dataset.jsonl_bytes(), stage)?;
    write_json(&dir.manifest(), &dataset.manifest, stage)?;
    Ok(dataset)
}

/// Training summary written next to the DPO checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    pub steps: usize,
    pub step0_loss: f64,
    pub final_loss: f64,
    /// Final batch loss under the multi-negative form not trained on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_alt_loss: Option<f64>,
    pub final_margins: MarginStats,
    pub kl: KlEstimate,
}

/// Trains LoRA adapters on the preference dataset with the SFT checkpoint
/// as frozen reference.
pub fn dpo(cfg: &RunConfig, dir: &RunDir) -> Result<(Policy, TrainLog, DpoReport)> {
    let stage = Stage::Dpo;
    let corpus = load_unlabeled(&dir.pref_corpus(), stage)?;
    let reference = load_checkpoint(&dir.sft_policy()).at(stage)?;
    let records = read_jsonl(open(&dir.prefs(), stage)?, &corpus).at(stage)?;
    let policy = reference.attach_lora(cfg.lora).at(stage)?;
    let run = match train_dpo(&policy, &reference, &records, &corpus, &cfg.dpo) {
        Ok(run) => run,
        Err(crate::dpo::DpoError::Diverged { step, last_good }) => {
            // Keep the last finite weights for inspection.
            create_parent(&dir.dpo_policy()).at(stage)?;
            save_checkpoint(&last_good, &dir.root.join("dpo/last_good.json")).at(stage)?;
            return Err(PipelineError::new(
                stage,
                format!("non-finite loss at step {step}; last good weights saved"),
            ));
        }
        Err(e) => return Err(PipelineError::new(stage, e)),
    };
    let merged = run.policy.merged().at(stage)?;
    let probes: Vec<_> = records
        .iter()
        .take(cfg.dpo.probe_prompts.max(1))
        .filter_map(|r| crate::prefgen::record_image(r, &corpus).map(|img| (img, &r.question)))
        .collect();
    let kl = kl_diagnostic(
        &merged,
        &reference,
        &probes,
        cfg.dpo.probe_samples.max(1),
        cfg.dpo.max_answer_len,
        derive_seed(cfg.dpo.seed, u64::MAX),
    )
    .at(stage)?;
    let report = DpoReport {
        steps: run.log.rows.len(),
        step0_loss: run.log.rows.first().map_or(f64::NAN, |r| r.loss),
        final_loss: run.log.rows.last().map_or(f64::NAN, |r| r.loss),
        final_alt_loss: run.log.rows.last().and_then(|r| r.alt_loss),
        final_margins: run.final_margins,
        kl,
    };
    create_parent(&dir.dpo_policy()).at(stage)?;
    save_checkpoint(&merged, &dir.dpo_policy()).at(stage)?;
    write_bytes(&dir.train_log(), &run.log.csv_bytes(), stage)?;
    write_json(&dir.dpo_report(), &report, stage)?;
    Ok((merged, run.log, report))
}

/// Consistency scores of both models at one temperature and sampling seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPair {
    pub seed: u64,
    pub sft: ConsistencyReport,
    pub dpo: ConsistencyReport,
}

/// Aggregate win/lose tallies of DPO against SFT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub win: usize,
    pub lose: usize,
    pub equal: usize,
    pub discarded: usize,
    /// `win / (win + lose)`.
    pub win_rate: f64,
    pub mean_len_dpo: f64,
    pub mean_len_sft: f64,
}

/// Final metrics of a run. Contains no timing data, so reruns compare
/// byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sft_clean: AccuracyReport,
    pub sft_distorted: AccuracyReport,
    pub dpo_clean: AccuracyReport,
    pub dpo_distorted: AccuracyReport,
    /// DPO minus SFT clean accuracy.
    pub accuracy_delta: f64,
    /// SFT clean minus distorted accuracy.
    pub premise_gap: f64,
    pub raw_count: usize,
    pub kept_count: usize,
    pub retention: f64,
    pub mean_rejected: f64,
    pub dpo: DpoReport,
    pub matchup: MatchSummary,
    pub consistency: Vec<ConsistencyPair>,
    pub sft_hash: String,
    pub dpo_hash: String,
    pub dataset_hash: String,
}

/// Scores both checkpoints on the held-out set and writes metrics, a
/// markdown summary and charts.
pub fn evaluate(cfg: &RunConfig, dir: &RunDir) -> Result<Metrics> {
    let stage = Stage::Eval;
    let episodes = load_labeled(&dir.eval_corpus(), stage)?;
    let items = eval_items(&episodes);
    let sft = load_checkpoint(&dir.sft_policy()).at(stage)?;
    let dpo = load_checkpoint(&dir.dpo_policy()).at(stage)?;
    let manifest: Option<DatasetManifest> = read_json(&dir.manifest(), stage)?;
    let manifest = manifest.ok_or_else(|| PipelineError::new(stage, "dataset manifest is empty"))?;
    let report: DpoReport = read_json(&dir.dpo_report(), stage)?;
    let log = read_train_log(&dir.train_log(), stage)?;
    let corpus = load_unlabeled(&dir.pref_corpus(), stage)?;
    let records = read_jsonl(open(&dir.prefs(), stage)?, &corpus).at(stage)?;
    let e = &cfg.eval;
    let tok = sft.tokenizer().clone();

    let clean = AugmentSpec::identity();
    let sft_clean = accuracy(&sft, &items, &clean, e.max_answer_len).at(stage)?;
    let sft_distorted = accuracy(&sft, &items, &e.distorted, e.max_answer_len).at(stage)?;
    let dpo_clean = accuracy(&dpo, &items, &clean, e.max_answer_len).at(stage)?;
    let dpo_distorted = accuracy(&dpo, &items, &e.distorted, e.max_answer_len).at(stage)?;
    let m = pairwise_match(&dpo, &sft, &items, e.max_answer_len, &tok).at(stage)?;
    let mut consistency = Vec::new();
    for &seed in &e.consistency_seeds {
        let a = consistency_probe(
            &sft,
            &items,
            &e.temperatures,
            e.consistency_samples,
            e.max_answer_len,
            seed,
            &tok,
        )
        .at(stage)?;
        let b = consistency_probe(
            &dpo,
            &items,
            &e.temperatures,
            e.consistency_samples,
            e.max_answer_len,
            seed,
            &tok,
        )
        .at(stage)?;
        consistency.extend(
            a.into_iter()
                .zip(b)
                .map(|(sft, dpo)| ConsistencyPair { seed, sft, dpo }),
        );
    }
    let kept = records.len();
    let metrics = Metrics {
        accuracy_delta: dpo_clean.accuracy - sft_clean.accuracy,
        premise_gap: sft_clean.accuracy - sft_distorted.accuracy,
        sft_clean,
        sft_distorted,
        dpo_clean,
        dpo_distorted,
        raw_count: manifest.raw_count,
        kept_count: kept,
        retention: if manifest.raw_count == 0 {
            0.0
        } else {
            kept as f64 / manifest.raw_count as f64
        },
        mean_rejected: records.iter().map(|r| r.rejected.len()).sum::<usize>() as f64 / kept.max(1) as f64,
        dpo: report,
        matchup: MatchSummary {
            win: m.win,
            lose: m.lose,
            equal: m.equal,
            discarded: m.discarded,
            win_rate: m.win_rate(),
            mean_len_dpo: m.mean_len_a,
            mean_len_sft: m.mean_len_b,
        },
        consistency,
        sft_hash: sft.content_hash(),
        dpo_hash: dpo.content_hash(),
        dataset_hash: manifest.dataset_hash,
    };
    write_json(&dir.metrics(), &metrics, stage)?;
    write_bytes(&dir.summary(), summary_markdown(&metrics).as_bytes(), stage)?;
    let margin = Series::new("batch margin", log.iter().map(|r| (r.step as f64, r.margin)).collect());
    let probe = Series::new(
        "probe margin",
        log.iter().map(|r| (r.step as f64, r.probe_margin)).collect(),
    );
    write_bytes(
        &dir.root.join("eval/margin.svg"),
        line_chart("Reward margin during DPO", "step", "margin", &[margin, probe]).as_bytes(),
        stage,
    )?;
    let bars = vec![
        ("win".to_string(), metrics.matchup.win as f64),
        ("lose".to_string(), metrics.matchup.lose as f64),
        ("equal".to_string(), metrics.matchup.equal as f64),
        ("discarded".to_string(), metrics.matchup.discarded as f64),
    ];
    write_bytes(
        &dir.root.join("eval/match.svg"),
        bar_chart("DPO vs SFT on held-out questions", "items", &bars).as_bytes(),
        stage,
    )?;
    Ok(metrics)
}

pub fn read_train_log(path: &Path, stage: Stage) -> Result<Vec<TrainRow>> {
    let mut reader = csv::Reader::from_reader(open(path, stage)?);
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<TrainRow>, _>>()
        .at(stage)
}

fn summary_markdown(m: &Metrics) -> String {
    let mut s = String::new();
    let mut line = |text: String| {
        s.push_str(&text);
        s.push('\n');
    };
    line("# Run summary".into());
    line(String::new());
    line("| metric | SFT | DPO |".into());
    line("|---|---|---|".into());
    line(format!(
        "| clean accuracy | {:.3} | {:.3} |",
        m.sft_clean.accuracy, m.dpo_clean.accuracy
    ));
    line(format!(
        "| distorted accuracy ({}) | {:.3} | {:.3} |",
        m.sft_distorted.augment, m.sft_distorted.accuracy, m.dpo_distorted.accuracy
    ));
    line(String::new());
    line(format!(
        "Preference pairs: {} kept of {} (retention {:.3}, mean rejected per record {:.2}).",
        m.kept_count, m.raw_count, m.retention, m.mean_rejected
    ));
    line(format!(
        "DPO: {} steps, loss {:.4} -> {:.4}, final mean margin {:.4}, margin-positive fraction {:.3}, KL {:.4} +- {:.4}.",
        m.dpo.steps,
        m.dpo.step0_loss,
        m.dpo.final_loss,
        m.dpo.final_margins.mean_margin,
        m.dpo.final_margins.positive_fraction,
        m.dpo.kl.mean,
        m.dpo.kl.std_err
    ));
    if let Some(alt) = m.dpo.final_alt_loss {
        line(format!(
            "Final batch loss under the other multi-negative form: {alt:.4}."
        ));
    }
    line(format!(
        "Pairwise: win {} / lose {} / equal {} / discarded {} (win rate {:.3}); mean length DPO {:.2} vs SFT {:.2}.",
        m.matchup.win,
        m.matchup.lose,
        m.matchup.equal,
        m.matchup.discarded,
        m.matchup.win_rate,
        m.matchup.mean_len_dpo,
        m.matchup.mean_len_sft
    ));
    line(String::new());
    line("| seed | temperature | Q SFT | Q DPO | A SFT | A DPO |".into());
    line("|---|---|---|---|---|---|".into());
    for c in &m.consistency {
        line(format!(
            "| {} | {} | {:.3} | {:.3} | {:.3} | {:.3} |",
            c.seed,
            c.sft.temperature,
            c.sft.q_consistency,
            c.dpo.q_consistency,
            c.sft.a_consistency,
            c.dpo.a_consistency
        ));
    }
    s
}

/// Wall-clock seconds per stage; kept apart from the metrics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
}

/// Runs one stage and records its duration.
fn timed<T>(timings: &mut Timings, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timings
        .stages
        .push((stage.name().to_string(), start.elapsed().as_secs_f64()));
    Ok(out)
}

/// Writes the config and runs every stage. Artifacts of completed stages
/// remain on disk when a later stage fails.
pub fn run_pipeline(cfg: &RunConfig, dir: &RunDir) -> Result<Metrics> {
    cfg.validate()?;
    fs::create_dir_all(dir.root()).at(Stage::Config)?;
    write_bytes(&dir.config(), format!("{}\n", cfg.to_json()).as_bytes(), Stage::Config)?;
    let mut timings = Timings::default();
    timed(&mut timings, Stage::GenCorpus, || gen_corpus(cfg, dir))?;
    timed(&mut timings, Stage::Sft, || sft(cfg, dir))?;
    run_from_prefs(cfg, dir, &mut timings)
}

fn run_from_prefs(cfg: &RunConfig, dir: &RunDir, timings: &mut Timings) -> Result<Metrics> {
    timed(timings, Stage::GenPrefs, || gen_prefs(cfg, dir))?;
    timed(timings, Stage::Dpo, || dpo(cfg, dir))?;
    let metrics = timed(timings, Stage::Eval, || evaluate(cfg, dir))?;
    write_json(&dir.timings(), timings, Stage::Eval)?;
    Ok(metrics)
}

/// Spearman rank correlation with average ranks for ties; `NaN` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub noise_step: usize,
    pub raw_count: usize,
    pub kept_count: usize,
    pub retention: f64,
    pub final_margin: f64,
    pub margin_pos_frac: f64,
    pub sft_clean_accuracy: f64,
    pub dpo_clean_accuracy: f64,
    pub win: usize,
    pub lose: usize,
    pub win_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Rank correlation of noise step with the final mean margin.
    pub margin_spearman: f64,
}

/// One pipeline per noise step. Corpora and the SFT checkpoint do not depend
/// on the augmentation, so they are built once and copied into each point's
/// directory, which stays a complete, replayable run.
pub fn sweep(cfg: &RunConfig, dir: &RunDir, steps: &[usize]) -> Result<SweepReport> {
    if steps.is_empty() {
        return Err(PipelineError::new(Stage::Sweep, "no sweep values given"));
    }
    if cfg.augment.iter().any(|s| s.params.noise_step.is_none()) {
        return Err(PipelineError::new(
            Stage::Sweep,
            "the noise_step axis needs diffusion augmentation specs",
        ));
    }
    cfg.validate()?;
    fs::create_dir_all(dir.root()).at(Stage::Sweep)?;
    write_bytes(&dir.config(), format!("{}\n", cfg.to_json()).as_bytes(), Stage::Config)?;
    let mut base_timings = Timings::default();
    timed(&mut base_timings, Stage::GenCorpus, || gen_corpus(cfg, dir))?;
    timed(&mut base_timings, Stage::Sft, || sft(cfg, dir))?;
    let mut rows = Vec::new();
    for &step in steps {
        let point_cfg = cfg.clone().with_noise_step(step);
        let point = RunDir::new(dir.root().join(format!("t{step}")));
        fs::create_dir_all(point.root()).at(Stage::Sweep)?;
        write_bytes(
            &point.config(),
            format!("{}\n", point_cfg.to_json()).as_bytes(),
            Stage::Sweep,
        )?;
        for (from, to) in [
            (dir.sft_corpus(), point.sft_corpus()),
            (dir.pref_corpus(), point.pref_corpus()),
            (dir.eval_corpus(), point.eval_corpus()),
            (dir.sft_policy(), point.sft_policy()),
            (dir.sft_report(), point.sft_report()),
        ] {
            create_parent(&to).at(Stage::Sweep)?;
            fs::copy(&from, &to).at(Stage::Sweep)?;
        }
        let mut timings = base_timings.clone();
        let m = run_from_prefs(&point_cfg, &point, &mut timings)?;
        rows.push(SweepRow {
            noise_step: step,
            raw_count: m.raw_count,
            kept_count: m.kept_count,
            retention: m.retention,
            final_margin: m.dpo.final_margins.mean_margin,
            margin_pos_frac: m.dpo.final_margins.positive_fraction,
            sft_clean_accuracy: m.sft_clean.accuracy,
            dpo_clean_accuracy: m.dpo_clean.accuracy,
            win: m.matchup.win,
            lose: m.matchup.lose,
            win_rate: m.matchup.win_rate,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.noise_step as f64).collect();
    let margins: Vec<f64> = rows.iter().map(|r| r.final_margin).collect();
    let report = SweepReport {
        margin_spearman: spearman(&xs, &margins),
        rows,
    };
    write_sweep_outputs(&report, dir)?;
    Ok(report)
}

fn write_sweep_outputs(report: &SweepReport, dir: &RunDir) -> Result<()> {
    let stage = Stage::Sweep;
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &report.rows {
        w.serialize(row).at(stage)?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::new(stage, e.to_string()))?;
    write_bytes(&dir.root().join("sweep.csv"), &bytes, stage)?;
    write_json(&dir.root().join("sweep.json"), report, stage)?;
    let pts = |f: fn(&SweepRow) -> f64| report.rows.iter().map(|r| (r.noise_step as f64, f(r))).collect();
    let margin = line_chart(
        "Final reward margin vs diffusion step",
        "noise step",
        "mean margin",
        &[Series::new("margin", pts(|r| r.final_margin))],
    );
    write_bytes(&dir.root().join("margin_vs_step.svg"), margin.as_bytes(), stage)?;
    let eval = line_chart(
        "Held-out results vs diffusion step",
        "noise step",
        "fraction",
        &[
            Series::new("DPO clean accuracy", pts(|r| r.dpo_clean_accuracy)),
            Series::new("SFT clean accuracy", pts(|r| r.sft_clean_accuracy)),
            Series::new("DPO win rate", pts(|r| r.win_rate)),
        ],
    );
    write_bytes(&dir.root().join("eval_vs_step.svg"), eval.as_bytes(), stage)
}

/// Human-readable dump of the first `n` records of a preference dataset:
/// counts, then each record's grid, question, chosen and rejected answers
/// and the augmentation behind every rejected one.
pub fn inspect<W: Write>(dataset: &Path, corpus: &Path, n: usize, mut out: W) -> Result<()> {
    let stage = Stage::Inspect;
    let episodes = load_unlabeled(corpus, stage)?;
    let reader = open(dataset, stage)?;
    let records = read_jsonl(reader, &episodes).at(stage)?;
    // Glyph tokens sit at the end of the vocabulary, so the widest alphabet
    // decodes any dataset.
    let tok = crate::tokenizer::Tokenizer::new(crate::tokenizer::MAX_GLYPHS).at(stage)?;
    let io = |e: std::io::Error| PipelineError::new(stage, e);
    let mean_rejected = records.iter().map(|r| r.rejected.len()).sum::<usize>() as f64 / records.len().max(1) as f64;
    writeln!(out, "dataset: {}", dataset.display()).map_err(io)?;
    writeln!(
        out,
        "records: {}  mean rejected per record: {mean_rejected:.2}",
        records.len()
    )
    .map_err(io)?;
    let manifest_path = dataset.with_file_name("manifest.json");
    if let Ok(Some(m)) = read_json::<Option<DatasetManifest>>(&manifest_path, stage) {
        writeln!(
            out,
            "raw pairs: {}  kept: {}  retention: {:.3}",
            m.raw_count,
            m.kept_count,
            m.kept_count as f64 / m.raw_count.max(1) as f64
        )
        .map_err(io)?;
    }
    for (i, r) in records.iter().take(n).enumerate() {
        let image = crate::prefgen::record_image(r, &episodes).expect("validated by read_jsonl");
        let decode = |t: &[crate::tokenizer::TokenId]| tok.decode(t).unwrap_or_else(|_| format!("{t:?}"));
        writeln!(out).map_err(io)?;
        writeln!(
            out,
            "#{i} episode {} question {}: {}",
            r.image_ref.episode,
            r.image_ref.question_index,
            decode(&r.question.text_tokens)
        )
        .map_err(io)?;
        let ascii = image.ascii();
        let grid: Vec<&str> = ascii.lines().map(str::trim_end).collect();
        let answers: Vec<String> = std::iter::once(format!("chosen:   {}", decode(r.chosen.content())))
            .chain(
                r.rejected
                    .iter()
                    .zip(&r.augment)
                    .map(|(y, a)| format!("rejected: {}  [{}]", decode(y.content()), a.label())),
            )
            .collect();
        let width = grid.iter().map(|l| l.chars().count()).max().unwrap_or(0);
        for k in 0..grid.len().max(answers.len()) {
            let left = grid.get(k).copied().unwrap_or("");
            let right = answers.get(k).map(String::as_str).unwrap_or("");
            writeln!(out, "  {left:<width$}   {right}").map_err(io)?;
        }
    }
    Ok(())
}
