use super::*;
use crate::optim::AdamConfig;
use crate::rng::rng;
use crate::tokenizer::{TokenSequence, EOS};
use crate::world::{generate_corpus, Episode, QuestionKind, WorldConfig};
use rand::Rng as _;

fn tiny_world() -> WorldConfig {
    WorldConfig {
        width: 2,
        height: 2,
        glyphs: 1,
        density: 0.5,
        ..WorldConfig::default()
    }
}

pub(crate) fn tiny_config() -> PolicyConfig {
    PolicyConfig {
        d_model: 4,
        n_layers: 1,
        n_heads: 1,
        mlp_ratio: 2,
        max_text_len: 16,
        grid_width: 2,
        grid_height: 2,
        glyphs: 1,
        ..PolicyConfig::default()
    }
}

fn small_config() -> PolicyConfig {
    PolicyConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_text_len: 16,
        grid_width: 2,
        grid_height: 2,
        glyphs: 3,
        ..PolicyConfig::default()
    }
}

fn small_world() -> WorldConfig {
    WorldConfig {
        width: 2,
        height: 2,
        glyphs: 3,
        density: 0.5,
        ..WorldConfig::default()
    }
}

fn episode(world: &WorldConfig, seed: u64) -> Episode {
    generate_corpus(seed, 1, world).unwrap().remove(0)
}

/// Fills every adapter factor with N(0, 0.3) noise so gradients flow
/// through both A and B.
fn randomize_lora(policy: &mut Policy, seed: u64) {
    let mut r = rng(seed);
    for t in policy.trainable_mut().values_mut() {
        for x in t.data_mut() {
            *x = r.random_range(-0.6..0.6);
        }
    }
}

#[test]
fn zero_head_gives_uniform_logprob() {
    let mut p = Policy::new(small_config()).unwrap();
    for name in ["head.w", "head.b"] {
        let t = p.params_mut().get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let ep = episode(&small_world(), 1);
    let v = p.tokenizer().vocab_size() as f64;
    for (q, y) in ep.questions.iter().zip(&ep.truth) {
        let lp = p.sequence_logprob(&ep.image, q, y).unwrap();
        let expected = -(y.len() as f64) * v.ln();
        assert!((lp - expected).abs() < 1e-12, "{lp} vs {expected}");
    }
}

#[test]
fn short_answers_enumerate_to_at_most_one() {
    let p = Policy::new(small_config()).unwrap();
    let ep = episode(&small_world(), 2);
    let q = &ep.questions[0];
    let v = p.tokenizer().vocab_size();
    let mut total = p
        .sequence_logprob(&ep.image, q, &TokenSequence::from_content(&[]))
        .unwrap()
        .exp();
    for t in 0..v as TokenId {
        if t == EOS {
            continue;
        }
        let lp = p
            .sequence_logprob(&ep.image, q, &TokenSequence::from_content(&[t]))
            .unwrap();
        assert!(lp <= 0.0);
        total += lp.exp();
    }
    assert!(total <= 1.0 + 1e-12 && total > 0.0, "{total}");
}

#[test]
fn logprob_matches_next_token_distribution() {
    let p = Policy::new(small_config()).unwrap();
    let ep = episode(&small_world(), 3);
    let q = &ep.questions[0];
    let logits = p.next_token_logits(&ep.image, q, &[]).unwrap();
    let logp = generate::log_softmax(&logits);
    let mass: f64 = logp.iter().map(|l| l.exp()).sum();
    assert!((mass - 1.0).abs() < 1e-12);
    let only_eos = p
        .sequence_logprob(&ep.image, q, &TokenSequence::from_content(&[]))
        .unwrap();
    assert!((only_eos - logp[EOS as usize]).abs() < 1e-12);
}

#[test]
fn decoding_is_causal() {
    let p = Policy::new(small_config()).unwrap();
    let ep = episode(&small_world(), 4);
    let q = &ep.questions[0];
    let tok = p.tokenizer();
    let a = [tok.glyph(1).unwrap(), tok.glyph(2).unwrap(), tok.glyph(3).unwrap()];
    let b = [tok.glyph(1).unwrap(), tok.glyph(3).unwrap(), tok.glyph(1).unwrap()];
    let la = p.all_logits(&ep.image, q, &a).unwrap();
    let lb = p.all_logits(&ep.image, q, &b).unwrap();
    let prompt = p.prompt_tokens(q).len();
    // Positions up to and including the first answer token see identical input.
    for i in 0..=prompt {
        assert_eq!(la[i], lb[i], "position {i}");
    }
    assert_ne!(la[prompt + 1], lb[prompt + 1]);
}

#[test]
fn image_changes_the_distribution() {
    let p = Policy::new(small_config()).unwrap();
    let w = small_world();
    let (a, b) = (episode(&w, 5), episode(&w, 6));
    assert_ne!(a.image.pixels(), b.image.pixels());
    let q = &a.questions[0];
    let la = p.next_token_logits(&a.image, q, &[]).unwrap();
    let lb = p.next_token_logits(&b.image, q, &[]).unwrap();
    assert_ne!(la, lb);
}

/// Fixed next-token table keyed by answer length; the image is ignored.
struct Table(Vec<Vec<f64>>);

impl AnswerModel for Table {
    type Session = ();

    fn vocab_size(&self) -> usize {
        self.0[0].len()
    }

    fn begin(&self, _: &crate::world::ToyImage, _: &crate::world::Question) -> Result<()> {
        Ok(())
    }

    fn next_logits(&self, _: &mut (), prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.0[prefix.len().min(self.0.len() - 1)].clone())
    }
}

fn table_question() -> (crate::world::ToyImage, crate::world::Question) {
    let ep = episode(&small_world(), 7);
    (ep.image, ep.questions[0].clone())
}

#[test]
fn greedy_follows_argmax_and_ties_go_low() {
    let eos = EOS as usize;
    let mut step0 = vec![0.0; 8];
    step0[5] = 3.0;
    let mut step1 = vec![0.0; 8];
    step1[4] = 1.0;
    step1[6] = 1.0;
    let mut step2 = vec![0.0; 8];
    step2[eos] = 2.0;
    let model = Table(vec![step0, step1, step2]);
    let (image, q) = table_question();
    let a = generate(&model, &image, &q, 0.0, 10, 1).unwrap();
    let b = generate(&model, &image, &q, 0.0, 10, 99).unwrap();
    assert_eq!(a.tokens(), &[5, 4, EOS]);
    assert_eq!(a, b);
    assert_eq!(a.logprob(), b.logprob());
}

#[test]
fn eos_is_forced_at_max_len() {
    let mut step = vec![0.0; 8];
    step[5] = 10.0;
    let model = Table(vec![step]);
    let (image, q) = table_question();
    let y = generate(&model, &image, &q, 0.0, 4, 0).unwrap();
    assert_eq!(y.tokens(), &[5, 5, 5, EOS]);
    assert!(matches!(
        generate(&model, &image, &q, 0.0, 0, 0),
        Err(PolicyError::Config(_))
    ));
    assert!(matches!(
        generate(&model, &image, &q, -1.0, 4, 0),
        Err(PolicyError::Config(_))
    ));
}

#[test]
fn sampling_frequencies_match_tempered_softmax() {
    let eos = EOS as usize;
    let mut step0 = vec![f64::NEG_INFINITY; 8];
    step0[4] = 0.0;
    step0[5] = 1.0;
    step0[6] = 2.0;
    let mut step1 = vec![0.0; 8];
    step1[eos] = 50.0;
    let model = Table(vec![step0.clone(), step1]);
    let (image, q) = table_question();
    let t = 0.7;
    let z: f64 = [0.0f64, 1.0, 2.0].iter().map(|l| (l / t).exp()).sum();
    let n = 4000;
    let mut counts = [0usize; 8];
    for seed in 0..n {
        let y = generate(&model, &image, &q, t, 5, seed as u64).unwrap();
        counts[y.tokens()[0] as usize] += 1;
    }
    for (tok, l) in [(4usize, 0.0f64), (5, 1.0), (6, 2.0)] {
        let p = (l / t).exp() / z;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let diff = (counts[tok] as f64 - n as f64 * p).abs();
        assert!(diff < 3.0 * sigma, "token {tok}: {} vs {}", counts[tok], n as f64 * p);
    }
}

#[test]
fn generated_logprob_equals_sequence_logprob() {
    let p = Policy::new(small_config()).unwrap();
    let ep = episode(&small_world(), 8);
    for (i, q) in ep.questions.iter().enumerate() {
        for temp in [0.0, 1.0] {
            let y = generate(&p, &ep.image, q, temp, 6, i as u64).unwrap();
            let direct = p.sequence_logprob(&ep.image, q, &y).unwrap();
            assert!(
                (y.logprob().unwrap() - direct).abs() < 1e-10,
                "{:?} vs {direct}",
                y.logprob()
            );
        }
    }
}

#[test]
fn fresh_lora_is_bit_identical_to_base() {
    let base = Policy::new(small_config()).unwrap();
    let adapted = base.attach_lora(LoraConfig::with_rank(2)).unwrap();
    let ep = episode(&small_world(), 9);
    for (q, y) in ep.questions.iter().zip(&ep.truth) {
        assert_eq!(
            base.sequence_logprob(&ep.image, q, y).unwrap().to_bits(),
            adapted.sequence_logprob(&ep.image, q, y).unwrap().to_bits()
        );
    }
    assert_eq!(adapted.merged().unwrap().params(), base.params());
}

#[test]
fn lora_scale_and_parameter_count() {
    let base = Policy::new(PolicyConfig::default()).unwrap();
    let adapted = base.attach_lora(LoraConfig::with_rank(8)).unwrap();
    let lora = adapted.lora().unwrap();
    assert_eq!(lora.alpha(), 16.0);
    assert_eq!(lora.scale(), 2.0);
    let expected: usize = lora
        .adapted_weights()
        .iter()
        .map(|w| {
            let s = base.params()[w].shape();
            8 * (s[0] + s[1])
        })
        .sum();
    assert_eq!(adapted.trainable_param_count(), expected);
    // Every attention, MLP and head projection is wrapped.
    assert_eq!(lora.adapted_weights().len(), 6 * base.config().n_layers + 1);
}

#[test]
fn oversized_rank_is_rejected() {
    let base = Policy::new(tiny_config()).unwrap();
    let err = base.attach_lora(LoraConfig::with_rank(5)).unwrap_err();
    assert!(matches!(err, PolicyError::LoraRank { rank: 5, limit: 4, .. }), "{err}");
    assert!(matches!(
        base.attach_lora(LoraConfig::with_rank(0)),
        Err(PolicyError::Config(_))
    ));
}

#[test]
fn merged_adapter_matches_unmerged() {
    let mut p = Policy::new(small_config())
        .unwrap()
        .attach_lora(LoraConfig::with_rank(2))
        .unwrap();
    randomize_lora(&mut p, 3);
    let merged = p.merged().unwrap();
    let ep = episode(&small_world(), 10);
    let q = &ep.questions[0];
    let a = p.sequence_logprob(&ep.image, q, &ep.truth[0]).unwrap();
    let b = merged.sequence_logprob(&ep.image, q, &ep.truth[0]).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn tiny_config_stays_under_one_hundred_trainable() {
    let p = Policy::new(tiny_config())
        .unwrap()
        .attach_lora(LoraConfig::with_rank(1))
        .unwrap();
    assert!(p.trainable_param_count() <= 100, "{}", p.trainable_param_count());
}

/// Analytic gradient of `sequence_logprob` against central differences,
/// over every adapter parameter and, separately, every base parameter.
#[test]
fn sequence_logprob_gradients_match_finite_differences() {
    let world = tiny_world();
    for seed in 0..5u64 {
        let mut p = Policy::new(PolicyConfig {
            init_seed: seed,
            ..tiny_config()
        })
        .unwrap()
        .attach_lora(LoraConfig::with_rank(1))
        .unwrap();
        randomize_lora(&mut p, seed);
        let ep = episode(&world, seed);
        let (q, y) = (&ep.questions[0], &ep.truth[0]);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true).unwrap();
        let lp = p.score_answers(&mut g, &bound, &ep.image, q, &[y]).unwrap()[0];
        let grads = bound.collect_grads(&g.backward(lp).unwrap(), &p);
        let h = 1e-5;
        for (name, analytic) in &grads {
            for (i, &a) in analytic.iter().enumerate() {
                let mut plus = p.clone();
                plus.trainable_mut().get_mut(name).unwrap().data_mut()[i] += h;
                let mut minus = p.clone();
                minus.trainable_mut().get_mut(name).unwrap().data_mut()[i] -= h;
                let fd = (plus.sequence_logprob(&ep.image, q, y).unwrap()
                    - minus.sequence_logprob(&ep.image, q, y).unwrap())
                    / (2.0 * h);
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(err < 1e-4, "seed {seed} {name}[{i}]: fd {fd} analytic {}", a);
            }
        }
    }
}

#[test]
fn base_gradients_match_finite_differences() {
    let world = tiny_world();
    let p = Policy::new(tiny_config()).unwrap();
    let ep = episode(&world, 11);
    let (q, y) = (&ep.questions[1], &ep.truth[1]);
    let mut g = Graph::new();
    let bound = p.bind(&mut g, true).unwrap();
    let lp = p.score_answers(&mut g, &bound, &ep.image, q, &[y]).unwrap()[0];
    let grads = bound.collect_grads(&g.backward(lp).unwrap(), &p);
    let h = 1e-5;
    let mut checked = 0;
    for (name, analytic) in &grads {
        // Strided subset keeps the runtime small on the larger tables.
        for i in (0..analytic.len()).step_by(7) {
            let mut plus = p.clone();
            plus.params_mut().get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = p.clone();
            minus.params_mut().get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (plus.sequence_logprob(&ep.image, q, y).unwrap()
                - minus.sequence_logprob(&ep.image, q, y).unwrap())
                / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-4, "{name}[{i}]: fd {fd} analytic {}", analytic[i]);
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn question_tokens_must_fit_the_slots() {
    let p = Policy::new(PolicyConfig {
        max_question_len: 2,
        ..small_config()
    })
    .unwrap();
    let ep = episode(&small_world(), 12);
    let q = crate::world::Question::new(QuestionKind::GlyphAt { row: 0, col: 1 }, p.tokenizer()).unwrap();
    assert!(matches!(
        p.sequence_logprob(&ep.image, &q, &ep.truth[0]),
        Err(PolicyError::ContextOverflow { .. })
    ));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut p = Policy::new(small_config())
        .unwrap()
        .attach_lora(LoraConfig::with_rank(2))
        .unwrap();
    randomize_lora(&mut p, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.json");
    save_checkpoint(&p, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, p);
    assert_eq!(back.content_hash(), p.content_hash());
    assert_ne!(p.without_lora().content_hash(), p.content_hash());
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let p = Policy::new(small_config()).unwrap();
    let mut ck = Checkpoint::from_policy(&p);
    ck.config.d_model = 16;
    assert!(ck.into_policy().is_err());
    let mut ck = Checkpoint::from_policy(&p);
    ck.params.remove("head.b");
    assert!(ck.into_policy().is_err());
}

fn sft_corpus() -> Vec<Episode> {
    generate_corpus(5, 24, &small_world()).unwrap()
}

#[test]
fn zero_step_sft_is_identity() {
    let p = Policy::new(small_config()).unwrap();
    let cfg = SftConfig {
        steps: 0,
        ..SftConfig::default()
    };
    let (trained, report) = sft_train(&p, &sft_corpus(), &cfg).unwrap();
    assert_eq!(trained, p);
    assert_eq!(report.steps, 0);
    assert!(report.train_losses.is_empty());
}

#[test]
fn short_sft_lowers_holdout_loss_and_is_deterministic() {
    let p = Policy::new(small_config()).unwrap();
    let cfg = SftConfig {
        steps: 40,
        batch_size: 8,
        warmup_steps: 5,
        adam: AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        },
        holdout_fraction: 0.25,
        ..SftConfig::default()
    };
    let corpus = sft_corpus();
    let (a, ra) = sft_train(&p, &corpus, &cfg).unwrap();
    let (b, rb) = sft_train(&p, &corpus, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.train_losses, rb.train_losses);
    assert!(ra.final_holdout_loss < ra.initial_holdout_loss, "{ra:?}");
}

#[test]
fn schedule_warms_up_then_decays() {
    let cfg = SftConfig {
        steps: 100,
        warmup_steps: 10,
        ..SftConfig::default()
    };
    let peak = cfg.adam.learning_rate;
    assert!(scheduled_rate(&cfg, 0) < scheduled_rate(&cfg, 5));
    assert!((scheduled_rate(&cfg, 10) - peak).abs() < 1e-15);
    assert!(scheduled_rate(&cfg, 99) < 0.01 * peak);
    let flat = SftConfig {
        cosine_decay: false,
        ..cfg
    };
    assert_eq!(scheduled_rate(&flat, 99), peak);
}
