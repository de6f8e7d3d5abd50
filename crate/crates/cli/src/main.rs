//! `selfpref`: command-line driver for the preference pipeline.
//!
//! Every command works on a run directory (`--out`, or `SELFPREF_OUT`).
//! Stage commands read the artifacts of earlier stages from it, so
//! `gen-corpus`, `sft`, `gen-prefs`, `dpo` and `eval` in order are
//! equivalent to `pipeline`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use selfpref_core::augment::AugmentSpec;
use selfpref_core::dpo::MultiForm;
use selfpref_core::pipeline::{self, PipelineError, RunConfig, RunDir, Stage};

#[derive(Parser, Debug)]
#[command(
    name = "selfpref",
    version,
    about = "Self-generated visual preference pairs and DPO on a toy vision-language policy"
)]
struct Cli {
    /// Worker threads for intra-stage parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the SFT, preference and evaluation corpora.
    GenCorpus(RunArgs),
    /// Supervised fine-tuning on the labeled corpus.
    Sft(RunArgs),
    /// Build the preference dataset from clean and augmented answers.
    GenPrefs(RunArgs),
    /// Train LoRA adapters with DPO against the SFT checkpoint.
    Dpo(RunArgs),
    /// Evaluate SFT and DPO checkpoints on the held-out set.
    Eval(RunArgs),
    /// Run every stage in order.
    Pipeline(RunArgs),
    /// One pipeline per value of a config axis.
    Sweep(SweepArgs),
    /// Print preference records side by side with their grids.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// JSON run config; defaults to the run directory's config.json, then
    /// to built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; reseeds every stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, env = "SELFPREF_OUT", default_value = "runs/default")]
    out: PathBuf,
    /// Augmentation spec as inline JSON, e.g. '{"kind":"diffusion_noise","params":{"noise_step":500}}'.
    #[arg(long, conflicts_with = "multi_negative")]
    augment: Option<String>,
    /// Diffusion step applied to every augmentation spec.
    #[arg(long)]
    noise_step: Option<usize>,
    /// JSON array of augmentation specs; one rejected answer per spec.
    #[arg(long)]
    multi_negative: Option<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Config axis to sweep; only `noise_step` is supported.
    #[arg(long, default_value = "noise_step")]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', default_value = "100,300,500,800,1000")]
    values: Vec<usize>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Preference dataset JSONL.
    dataset: PathBuf,
    /// Unlabeled corpus the records point into; defaults to the run
    /// directory's corpus/pref.jsonl next to the dataset.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Records to print.
    #[arg(short, default_value_t = 5)]
    n: usize,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let config_err = |msg: String| PipelineError::new(Stage::Config, msg);
        let existing = RunDir::new(&self.out).config();
        let mut cfg = match (&self.config, existing.exists()) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, true) => RunConfig::load(&existing)?,
            (None, false) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(json) = &self.augment {
            let spec: AugmentSpec = serde_json::from_str(json).map_err(|e| config_err(format!("--augment: {e}")))?;
            cfg.augment = vec![spec];
        }
        if let Some(json) = &self.multi_negative {
            let specs: Vec<AugmentSpec> =
                serde_json::from_str(json).map_err(|e| config_err(format!("--multi-negative: {e}")))?;
            cfg.augment = specs;
            cfg.dpo.multi.get_or_insert(MultiForm::Softmax);
        }
        if let Some(step) = self.noise_step {
            cfg = cfg.with_noise_step(step);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Writes the resolved config so the directory stays self-describing.
fn prepare(args: &RunArgs) -> Result<(RunConfig, RunDir), PipelineError> {
    let cfg = args.resolve()?;
    let dir = RunDir::new(&args.out);
    std::fs::create_dir_all(dir.root())
        .and_then(|()| std::fs::write(dir.config(), format!("{}\n", cfg.to_json())))
        .map_err(|e| PipelineError::new(Stage::Config, format!("{}: {e}", dir.root().display())))?;
    Ok((cfg, dir))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(PipelineError::new(Stage::Config, "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::GenCorpus(args) => {
            let (cfg, dir) = prepare(&args)?;
            pipeline::gen_corpus(&cfg, &dir)?;
            println!("corpora written to {}", dir.root().join("corpus").display());
        }
        Command::Sft(args) => {
            let (cfg, dir) = prepare(&args)?;
            pipeline::sft(&cfg, &dir)?;
            println!("SFT checkpoint written to {}", dir.sft_policy().display());
        }
        Command::GenPrefs(args) => {
            let (cfg, dir) = prepare(&args)?;
            let ds = pipeline::gen_prefs(&cfg, &dir)?;
            println!(
                "{} of {} pairs kept (retention {:.3}); written to {}",
                ds.kept_count(),
                ds.raw_count,
                ds.retention(),
                dir.prefs().display()
            );
        }
        Command::Dpo(args) => {
            let (cfg, dir) = prepare(&args)?;
            let (_, _, report) = pipeline::dpo(&cfg, &dir)?;
            println!(
                "{} steps, loss {:.4} -> {:.4}, margin {:.4}, positive fraction {:.3}",
                report.steps,
                report.step0_loss,
                report.final_loss,
                report.final_margins.mean_margin,
                report.final_margins.positive_fraction
            );
        }
        Command::Eval(args) => {
            let (cfg, dir) = prepare(&args)?;
            pipeline::evaluate(&cfg, &dir)?;
            print!("{}", std::fs::read_to_string(dir.summary())?);
        }
        Command::Pipeline(args) => {
            let (cfg, dir) = prepare(&args)?;
            pipeline::run_pipeline(&cfg, &dir)?;
            print!("{}", std::fs::read_to_string(dir.summary())?);
        }
        Command::Sweep(args) => {
            if args.axis != "noise_step" {
                bail!(PipelineError::new(
                    Stage::Sweep,
                    format!("unsupported sweep axis {:?}; supported: noise_step", args.axis)
                ));
            }
            let (cfg, dir) = prepare(&args.run)?;
            let report = pipeline::sweep(&cfg, &dir, &args.values)?;
            println!("noise_step  kept/raw   retention  margin    win/lose");
            for r in &report.rows {
                println!(
                    "{:>10}  {:>4}/{:<4}  {:>9.3}  {:>7.4}  {:>4}/{}",
                    r.noise_step, r.kept_count, r.raw_count, r.retention, r.final_margin, r.win, r.lose
                );
            }
            println!("margin Spearman vs noise step: {:.3}", report.margin_spearman);
        }
        Command::Inspect(args) => {
            let corpus = args.corpus.unwrap_or_else(|| default_corpus(&args.dataset));
            let stdout = std::io::stdout();
            pipeline::inspect(&args.dataset, &corpus, args.n, stdout.lock())?;
        }
    }
    Ok(())
}

fn default_corpus(dataset: &Path) -> PathBuf {
    dataset
        .parent()
        .and_then(Path::parent)
        .unwrap_or_else(|| Path::new("."))
        .join("corpus/pref.jsonl")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Stage errors already carry their cause in the message.
            match err.downcast_ref::<PipelineError>() {
                Some(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.stage.exit_code() as u8)
                }
                None => {
                    eprintln!("error: {err:#}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
