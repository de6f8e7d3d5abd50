//! Hot paths of the pipeline: the matmul kernel, one policy forward and
//! backward pass, greedy decoding, the forward diffusion process and a DPO
//! gradient step.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use selfpref_core::augment::{apply, AugmentSpec};
use selfpref_core::dpo::{loss_and_grad, resolve, score_records};
use selfpref_core::policy::{generate, LoraConfig, Policy, PolicyConfig};
use selfpref_core::prefgen::{build_dataset, PrefgenConfig};
use selfpref_core::tensor::Graph;
use selfpref_core::world::{generate_corpus, strip_truth, WorldConfig};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16usize, 64, 128] {
        let a: Vec<f64> = (0..n * n).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..n * n).map(|i| (i as f64 * 0.11).cos()).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.constant(vec![n, n], a.clone()).unwrap();
                let y = g.constant(vec![n, n], b.clone()).unwrap();
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn policy_paths(c: &mut Criterion) {
    let world = WorldConfig::default();
    let episodes = generate_corpus(0, 4, &world).unwrap();
    let episode = &episodes[0];
    let (question, truth) = (&episode.questions[0], &episode.truth[0]);
    let policy = Policy::new(PolicyConfig::default()).unwrap();

    c.bench_function("sequence_logprob", |b| {
        b.iter(|| black_box(policy.sequence_logprob(&episode.image, question, truth).unwrap()))
    });
    c.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = policy.bind(&mut g, true).unwrap();
            let prefix = policy.encode_context(&mut g, &p, &episode.image, question).unwrap();
            let lp = policy.score_answer(&mut g, &p, &prefix, question, truth).unwrap();
            black_box(g.backward(lp).unwrap());
        })
    });
    c.bench_function("greedy_generate", |b| {
        b.iter(|| black_box(generate(&policy, &episode.image, question, 0.0, 12, 0).unwrap()))
    });
    c.bench_function("diffuse_t800", |b| {
        let spec = AugmentSpec::diffusion_strong(3);
        b.iter(|| black_box(apply(&spec, &episode.image).unwrap()))
    });
}

fn dpo_step(c: &mut Criterion) {
    let world = WorldConfig::default();
    let corpus = strip_truth(&generate_corpus(1, 16, &world).unwrap());
    let reference = Policy::new(PolicyConfig::default()).unwrap();
    let cfg = PrefgenConfig {
        n_pairs: Some(32),
        ..PrefgenConfig::default()
    };
    let dataset = build_dataset(&corpus, &reference, &AugmentSpec::diffusion_strong(0), &cfg).unwrap();
    let views = resolve(&dataset.records, &corpus).unwrap();
    let refs = score_records(&reference, &views).unwrap();
    let policy = reference.attach_lora(LoraConfig::with_rank(8)).unwrap();
    c.bench_function(&format!("dpo_loss_and_grad_{}", views.len()), |b| {
        b.iter(|| black_box(loss_and_grad(&policy, &views, &refs, 0.1, None).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = matmul, policy_paths, dpo_step
}
criterion_main!(benches);
