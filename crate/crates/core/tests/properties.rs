//! Invariants checked over generated inputs.

use std::f64::consts::LN_2;

use proptest::prelude::*;
use rand::Rng as _;
use selfpref_core::augment::{apply, AugmentKind, AugmentSpec};
use selfpref_core::dpo::{
    bt_nll, bt_probability, dpo_loss_multi_value, dpo_loss_value, loss_and_grad, score_records, MultiForm, PairView,
};
use selfpref_core::pipeline::spearman;
use selfpref_core::policy::{LoraConfig, Policy, PolicyConfig};
use selfpref_core::prefgen::{filter_equal, read_jsonl, ImageRef, PreferenceDataset, PreferenceRecord};
use selfpref_core::rng::rng;
use selfpref_core::tokenizer::{TokenSequence, SEP};
use selfpref_core::world::{generate_corpus, strip_truth, WorldConfig};

fn small_world() -> WorldConfig {
    WorldConfig {
        width: 3,
        height: 3,
        glyphs: 3,
        density: 0.5,
        ..WorldConfig::default()
    }
}

fn small_policy() -> PolicyConfig {
    PolicyConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_text_len: 16,
        grid_width: 3,
        grid_height: 3,
        glyphs: 3,
        ..PolicyConfig::default()
    }
}

fn seq(content: &[u32]) -> TokenSequence {
    TokenSequence::from_content(content)
}

fn answer_strategy() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(4u32..8, 0..3)
}

fn kind_strategy() -> impl Strategy<Value = AugmentKind> {
    prop::sample::select(vec![
        AugmentKind::Identity,
        AugmentKind::RandFlip,
        AugmentKind::RandResizedCrop,
        AugmentKind::RandomCrop,
        AugmentKind::CenterCrop,
        AugmentKind::RandomAffine,
        AugmentKind::RandomInvert,
        AugmentKind::DiffusionNoise,
        AugmentKind::MocoRecipe,
    ])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_at_reference_is_ln2(c in -50.0f64..0.0, r in -50.0f64..0.0, beta in 0.001f64..10.0) {
        prop_assert!((dpo_loss_value(c, c, r, r, beta) - LN_2).abs() < 1e-12);
    }

    #[test]
    fn multi_loss_reduces_to_single(pc in -30.0f64..0.0, rc in -30.0f64..0.0, pr in -30.0f64..0.0, rr in -30.0f64..0.0, beta in 0.01f64..5.0) {
        let single = dpo_loss_value(pc, rc, pr, rr, beta);
        for form in [MultiForm::Displayed, MultiForm::Softmax] {
            prop_assert!((dpo_loss_multi_value(pc, rc, &[pr], &[rr], beta, form) - single).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_falls_as_chosen_gains(pc in -30.0f64..0.0, delta in 0.01f64..5.0, beta in 0.01f64..5.0) {
        prop_assert!(dpo_loss_value(pc + delta, -10.0, -12.0, -10.0, beta) < dpo_loss_value(pc, -10.0, -12.0, -10.0, beta));
    }

    #[test]
    fn bt_probabilities_form_a_distribution(rewards in prop::collection::vec(-40.0f64..40.0, 2..6)) {
        let total: f64 = (0..rewards.len())
            .map(|i| {
                let others: Vec<f64> = rewards.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| *r).collect();
                bt_probability(rewards[i], &others)
            })
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(bt_nll(rewards[0], &rewards[1..]) >= 0.0);
    }

    #[test]
    fn augmentations_are_deterministic_and_shape_preserving(kind in kind_strategy(), seed in any::<u64>(), ep in 0u64..50) {
        let image = generate_corpus(ep, 1, &small_world()).unwrap().remove(0).image;
        let spec = AugmentSpec::new(kind, seed);
        let spec = if kind == AugmentKind::DiffusionNoise { AugmentSpec::diffusion(500, seed) } else { spec };
        let a = apply(&spec, &image).unwrap();
        prop_assert_eq!(&a, &apply(&spec, &image).unwrap());
        prop_assert_eq!(a.pixels().len(), image.pixels().len());
        if kind != AugmentKind::DiffusionNoise {
            prop_assert!(a.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn filtering_keeps_exactly_the_records_with_a_differing_answer(
        rows in prop::collection::vec((answer_strategy(), prop::collection::vec(answer_strategy(), 0..4)), 0..30)
    ) {
        let corpus = strip_truth(&generate_corpus(0, 1, &small_world()).unwrap());
        let records: Vec<PreferenceRecord> = rows
            .iter()
            .map(|(c, rs)| PreferenceRecord {
                image_ref: ImageRef { episode: 0, question_index: 0, hash: corpus[0].image.content_hash() },
                question: corpus[0].questions[0].clone(),
                chosen: seq(c),
                rejected: rs.iter().map(|r| seq(r)).collect(),
                augment: vec![AugmentSpec::identity(); rs.len()],
            })
            .collect();
        let expected = rows.iter().filter(|(c, rs)| rs.iter().any(|r| seq(r) != seq(c))).count();
        let ds = filter_equal(records);
        prop_assert_eq!(ds.raw_count, rows.len());
        prop_assert_eq!(ds.kept_count(), expected);
        prop_assert!((0.0..=1.0).contains(&ds.retention()));
        for r in &ds.records {
            prop_assert!(!r.rejected.is_empty());
            prop_assert_eq!(r.rejected.len(), r.augment.len());
            prop_assert!(r.rejected.iter().all(|y| *y != r.chosen));
        }

        // The export reads back to the same records.
        let back = read_jsonl(&ds.jsonl_bytes()[..], &corpus).unwrap();
        prop_assert_eq!(&back, &ds.records);
        let again = PreferenceDataset { records: back, raw_count: ds.raw_count, manifest: None };
        prop_assert_eq!(again.jsonl_bytes(), ds.jsonl_bytes());
    }

    #[test]
    fn spearman_ignores_monotone_transforms(xs in prop::collection::vec(-100.0f64..100.0, 3..12)) {
        let ys: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0 * x).collect();
        let rho = spearman(&xs, &ys);
        let distinct = xs.iter().any(|x| *x != xs[0]);
        if distinct {
            prop_assert!((rho - 1.0).abs() < 1e-12);
            let neg: Vec<f64> = ys.iter().map(|y| -y).collect();
            prop_assert!((spearman(&xs, &neg) + 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Chunked, parallel gradient accumulation equals the mean of
    /// per-record gradients.
    #[test]
    fn batch_gradient_is_mean_of_record_gradients(seed in any::<u64>(), n in 1usize..20, multi in any::<bool>()) {
        let reference = Policy::new(PolicyConfig { init_seed: seed, ..small_policy() }).unwrap();
        let mut policy = reference.attach_lora(LoraConfig::with_rank(2)).unwrap();
        let mut r = rng(seed);
        for t in policy.trainable_mut().values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = r.random_range(-0.3..0.3));
        }
        let episodes = generate_corpus(seed, n, &small_world()).unwrap();
        let vocab = reference.tokenizer().vocab_size() as u32;
        let n_rej = if multi { 2 } else { 1 };
        let mut draw = || {
            let len = r.random_range(0..4);
            seq(&(0..len).map(|_| r.random_range(SEP + 1..vocab)).collect::<Vec<_>>())
        };
        let answers: Vec<(TokenSequence, Vec<TokenSequence>)> =
            (0..n).map(|_| (draw(), (0..n_rej).map(|_| draw()).collect())).collect();
        let views: Vec<PairView<'_>> = episodes
            .iter()
            .zip(&answers)
            .map(|(e, (c, rs))| PairView { image: &e.image, question: &e.questions[0], chosen: c, rejected: rs })
            .collect();
        let refs = score_records(&reference, &views).unwrap();
        let form = multi.then_some(MultiForm::Softmax);
        let (loss, grads, stats) = loss_and_grad(&policy, &views, &refs, 0.3, form).unwrap();
        if multi {
            // The side-channel loss matches actually training the other form.
            let (other, _, _) = loss_and_grad(&policy, &views, &refs, 0.3, Some(MultiForm::Displayed)).unwrap();
            let alt = stats.iter().map(|s| s.alt_loss.unwrap()).sum::<f64>() / n as f64;
            prop_assert!((alt - other).abs() < 1e-12, "{alt} vs {other}");
        } else {
            prop_assert!(stats.iter().all(|s| s.alt_loss.is_none()));
        }
        let mut mean_loss = 0.0;
        let mut mean = grads.clone();
        mean.values_mut().for_each(|g| g.iter_mut().for_each(|x| *x = 0.0));
        for i in 0..n {
            let (l, g, _) = loss_and_grad(&policy, &views[i..=i], &refs[i..=i], 0.3, form).unwrap();
            mean_loss += l / n as f64;
            for (name, gi) in g {
                for (m, x) in mean.get_mut(&name).unwrap().iter_mut().zip(gi) {
                    *m += x / n as f64;
                }
            }
        }
        prop_assert!((loss - mean_loss).abs() < 1e-12);
        for (name, g) in &grads {
            for (a, b) in g.iter().zip(&mean[name]) {
                prop_assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "{name}: {a} vs {b}");
            }
        }
    }
}
