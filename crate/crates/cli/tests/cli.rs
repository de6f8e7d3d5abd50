//! End-to-end behaviour of the `selfpref` binary on a tiny config.

use std::path::Path;
use std::process::{Command, Output};

use selfpref_core::augment::AugmentSpec;
use selfpref_core::pipeline::RunConfig;
use selfpref_core::policy::PolicyConfig;
use selfpref_core::world::WorldConfig;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_selfpref"));
    cmd.env_remove("SELFPREF_OUT");
    cmd
}

fn tiny_config() -> RunConfig {
    let world = WorldConfig {
        width: 4,
        height: 4,
        glyphs: 4,
        density: 0.4,
        ..WorldConfig::default()
    };
    let mut cfg = RunConfig {
        policy: PolicyConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            grid_width: 4,
            grid_height: 4,
            glyphs: 4,
            ..PolicyConfig::default()
        },
        world,
        ..RunConfig::default()
    };
    cfg.corpus.sft_episodes = 60;
    cfg.corpus.pref_episodes = 24;
    cfg.corpus.eval_episodes = 10;
    cfg.sft.steps = 60;
    cfg.sft.batch_size = 8;
    cfg.augment = vec![AugmentSpec::diffusion(1000, 0)];
    cfg.dpo.batch_size = 8;
    cfg.dpo.probe_prompts = 4;
    cfg.dpo.probe_samples = 1;
    cfg.eval.temperatures = vec![0.7];
    cfg.eval.consistency_seeds = vec![0];
    cfg.eval.consistency_samples = 1;
    cfg.eval.world = None;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

#[test]
fn pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("run");
    let res = run(bin()
        .args(["--threads", "1", "pipeline", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out));
    assert!(res.status.success());
    for file in [
        "config.json",
        "corpus/sft.jsonl",
        "corpus/pref.jsonl",
        "corpus/eval.jsonl",
        "sft/policy.json",
        "sft/report.json",
        "prefs/dataset.jsonl",
        "prefs/manifest.json",
        "dpo/policy.json",
        "dpo/train_log.csv",
        "dpo/report.json",
        "eval/metrics.json",
        "eval/summary.md",
        "eval/margin.svg",
        "eval/match.svg",
        "timings.json",
    ] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("clean accuracy"), "{stdout}");

    // Stage commands pick the config up from the run directory.
    let again = run(bin().arg("eval").arg("--out").arg(&out));
    assert!(again.status.success());
}

#[test]
fn out_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("from-env");
    let res = run(bin()
        .env("SELFPREF_OUT", &out)
        .arg("gen-corpus")
        .arg("--config")
        .arg(&config));
    assert!(res.status.success());
    assert!(out.join("corpus/eval.jsonl").is_file());
}

#[test]
fn identity_augmentation_fails_at_gen_prefs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("run");
    let res = run(bin()
        .arg("pipeline")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--augment", r#"{"kind":"identity"}"#]));
    assert_eq!(res.status.code(), Some(12));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(
        stderr.contains("gen-prefs") && stderr.contains("filtered out"),
        "{stderr}"
    );
    // Earlier stages keep their artifacts.
    assert!(out.join("sft/policy.json").is_file());
    assert!(!out.join("prefs/dataset.jsonl").exists());
}

#[test]
fn missing_inputs_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let res = run(bin().arg("dpo").arg("--out").arg(tmp.path().join("empty")));
    assert_eq!(res.status.code(), Some(13));
    assert!(String::from_utf8_lossy(&res.stderr).contains("stage dpo failed"));
}

#[test]
fn bad_config_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, r#"{"dpo": {"beta": -1.0}}"#).unwrap();
    let res = run(bin()
        .arg("gen-corpus")
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(tmp.path()));
    assert_eq!(res.status.code(), Some(2));

    let res = run(bin()
        .arg("gen-corpus")
        .arg("--out")
        .arg(tmp.path())
        .args(["--augment", "{not json"]));
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("--augment"));
}

#[test]
fn multi_negative_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("run");
    let specs = r#"[{"kind":"diffusion_noise","params":{"noise_step":1000},"seed":1},
                    {"kind":"diffusion_noise","params":{"noise_step":800},"seed":2}]"#;
    for stage in ["gen-corpus", "sft", "gen-prefs"] {
        let res = run(bin()
            .arg(stage)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .args(["--multi-negative", specs]));
        assert!(res.status.success(), "{stage}");
    }
    let dataset = out.join("prefs/dataset.jsonl");
    let records = std::fs::read_to_string(&dataset).unwrap().lines().count();
    assert!(records > 0);

    let header = run(bin().arg("inspect").arg(&dataset).args(["-n", "0"]));
    assert!(header.status.success());
    let text = String::from_utf8_lossy(&header.stdout);
    assert!(text.contains(&format!("records: {records}")), "{text}");
    assert!(!text.contains("chosen:"));

    let all = run(bin().arg("inspect").arg(&dataset).args(["-n", "100000"]));
    assert!(all.status.success());
    let text = String::from_utf8_lossy(&all.stdout);
    assert_eq!(text.matches("chosen:").count(), records);
    // Every rejected answer carries its augmentation.
    let rejected = text.lines().filter(|l| l.contains("rejected:")).count();
    let tagged = text
        .lines()
        .filter(|l| l.contains("rejected:") && l.contains("[diffusion"))
        .count();
    assert!(rejected >= records);
    assert_eq!(rejected, tagged);
}

#[test]
fn inspect_reports_corrupt_line() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("run");
    for stage in ["gen-corpus", "sft", "gen-prefs"] {
        assert!(
            run(bin().arg(stage).arg("--config").arg(&config).arg("--out").arg(&out))
                .status
                .success()
        );
    }
    let dataset = out.join("prefs/dataset.jsonl");
    let mut text = std::fs::read_to_string(&dataset).unwrap();
    text.push_str("{\"broken\": \n");
    let corrupt = out.join("prefs/corrupt.jsonl");
    std::fs::write(&corrupt, &text).unwrap();
    let line = text.lines().count();
    let res = run(bin().arg("inspect").arg(&corrupt));
    assert_eq!(res.status.code(), Some(16));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains(&format!("line {line}")), "{stderr}");
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("sweep");
    let res = run(bin()
        .arg("sweep")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--values", "800,1000"]));
    // The tiny policy barely reacts to weak noise, so only strong steps are
    // guaranteed to leave pairs to train on.
    match res.status.code() {
        Some(0) => {
            let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
            assert_eq!(csv.lines().count(), 3, "{csv}");
            assert!(out.join("margin_vs_step.svg").is_file());
            assert!(out.join("eval_vs_step.svg").is_file());
            assert!(out.join("t1000/eval/metrics.json").is_file());
        }
        code => panic!("sweep failed with {code:?}: {}", String::from_utf8_lossy(&res.stderr)),
    }
    let bad = run(bin().arg("sweep").arg("--out").arg(&out).args(["--axis", "beta"]));
    assert_eq!(bad.status.code(), Some(15));
}
