use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::generate_parallel_corpus;
use crate::corpus::{generate_paraphrase_corpus, synthetic_languages, PackingMode};
use crate::encoder::EncoderConfig;
use crate::numerics::{grad_check, DEFAULT_FD_STEP};

fn corpus(n: usize) -> Vec<ParallelPair> {
    let langs = synthetic_languages(3, 12).unwrap();
    generate_parallel_corpus(&langs, n, (2, 4), 3).unwrap()
}

fn tiny_run(epochs: usize) -> RunConfig {
    RunConfig {
        train: TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 2,
            batch_size: 4,
            epochs,
            seed: 5,
            ..TrainConfig::default()
        },
        encoder: ModelShape {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 12,
            dropout: 0.1,
        },
        corpus: CorpusSettings::default(),
    }
}

#[test]
fn split_is_deterministic_disjoint_and_ten_percent() {
    let (train, val) = split_train_validation(1000);
    assert_eq!(val.len(), 100);
    assert_eq!(train.len(), 900);
    let all: HashSet<usize> = train.iter().chain(&val).copied().collect();
    assert_eq!(all.len(), 1000);
    assert_eq!(split_train_validation(1000), (train, val));
    // Prefix-stable membership is not required, but tiny inputs must not panic.
    assert_eq!(split_train_validation(0), (vec![], vec![]));
    assert_eq!(split_train_validation(5).1.len(), 0);
}

#[test]
fn batch_ranges_merge_trailing_singleton() {
    assert_eq!(batch_ranges(10, 4), vec![0..4, 4..8, 8..10]);
    assert_eq!(batch_ranges(9, 4), vec![0..4, 4..9]);
    assert_eq!(batch_ranges(1, 4), vec![0..1]);
    assert_eq!(batch_ranges(8, 4), vec![0..4, 4..8]);
}

fn tiny_batch(params: &ModelParams, vocab: &Vocab, pairs: &[ParallelPair]) -> Vec<PackedExample> {
    pairs
        .iter()
        .map(|p| pack_text_pair(vocab, p, params.config().max_len).unwrap())
        .collect()
}

#[test]
fn batch_gradient_matches_finite_differences() {
    let pairs = corpus(3);
    let vocab = Vocab::build(&pairs);
    let config = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 12,
        max_len: 12,
        dropout: 0.1,
    };
    let params = ModelParams::init(config, 1).unwrap();
    let examples = tiny_batch(&params, &vocab, &pairs);
    let refs: Vec<&PackedExample> = examples.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let targets = corrupt_batch(&refs, 0.4, vocab.len(), &mut rng);
    assert!(label_count(&targets) > 0);
    let cfg = TrainConfig {
        lambda: 0.7,
        ..TrainConfig::default()
    };
    let f = |point: &[Tensor]| {
        let mut p = params.clone();
        p.tensors_mut().clone_from_slice(point);
        let (losses, grads) = batch_loss_and_gradients(
            &p,
            &refs,
            &targets,
            &cfg,
            9,
            Objective::Combined,
            &IdentityPredictor,
        )?;
        Ok((losses.total, grads.into_dense(point)))
    };
    let report = grad_check(f, params.tensors(), DEFAULT_FD_STEP).unwrap();
    assert!(report.max_relative_error < 1e-5, "{report:?}");
}

#[test]
fn zero_lambda_matches_mlm_only_bitwise() {
    let pairs = corpus(8);
    let vocab = Vocab::build(&pairs);
    let run = tiny_run(1);
    let params = ModelParams::init(run.encoder.with_vocab(vocab.len()), 3).unwrap();
    let examples = tiny_batch(&params, &vocab, &pairs);
    let cfg = TrainConfig {
        lambda: 0.0,
        ..run.train.clone()
    };
    let mut a = TrainState::new(params.clone());
    let mut b = TrainState::new(params);
    let mut ra = ChaCha8Rng::seed_from_u64(1);
    let mut rb = ChaCha8Rng::seed_from_u64(1);
    for step in 0..6 {
        let batch: Vec<&PackedExample> = examples[step % 2 * 4..step % 2 * 4 + 4].iter().collect();
        let la = train_step(&mut a, &batch, &cfg, &mut ra).unwrap();
        let lb = train_step_mlm_only(&mut b, &batch, &cfg, &mut rb).unwrap();
        assert_eq!(la.mlm.to_bits(), lb.mlm.to_bits());
        assert_eq!(a, b, "diverged at step {step}");
    }
    assert_eq!(a.steps_taken(), 6);
}

#[test]
fn training_run_is_deterministic_and_logs_identity() {
    let pairs = corpus(60);
    let run = tiny_run(2);
    let mut seen = Vec::new();
    let out = train(&pairs, &run, Objective::Combined, |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2]);
    assert_eq!(out.metrics.records.len(), 2);
    for r in &out.metrics.records {
        for l in [&r.train, &r.validation] {
            assert!((l.total - (l.mlm + run.train.lambda * l.alignment)).abs() < 1e-12);
        }
        assert!(r.rankme >= 1.0 && r.rankme <= 8.0 + 1e-9);
        assert!(r.first_component_share > 0.0 && r.first_component_share <= 1.0);
    }
    // 54 training pairs in batches of 4: 13 full batches plus a merged remainder of 2.
    assert_eq!(out.metrics.records[0].steps, 14);
    let again = train(&pairs, &run, Objective::Combined, |_| {}).unwrap();
    assert_eq!(
        out.metrics.to_jsonl().unwrap(),
        again.metrics.to_jsonl().unwrap()
    );
    assert_eq!(out.model, again.model);
    let parsed = MetricsLog::from_jsonl(&out.metrics.to_jsonl().unwrap()).unwrap();
    assert_eq!(parsed, out.metrics);
}

#[test]
fn monolingual_mode_without_paraphrases_is_a_config_error() {
    let pairs = corpus(40);
    let mut run = tiny_run(1);
    run.train.mode = PackingMode::Monolingual;
    let err = train(&pairs, &run, Objective::Combined, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn monolingual_mode_trains_on_paraphrases() {
    let langs = synthetic_languages(2, 12).unwrap();
    let pairs = generate_paraphrase_corpus(&langs, 40, (2, 4), 1).unwrap();
    let mut run = tiny_run(1);
    run.train.mode = PackingMode::Monolingual;
    let out = train(&pairs, &run, Objective::Combined, |_| {}).unwrap();
    assert_eq!(out.metrics.records.len(), 1);
}

#[test]
fn oversized_pair_names_its_index() {
    let mut pairs = corpus(30);
    pairs[4].text_a = [pairs[4].text_a.as_str(); 6].join(" ");
    let err = train(&pairs, &tiny_run(1), Objective::Combined, |_| {}).unwrap_err();
    assert!(err.to_string().contains("pair 4"), "{err}");
}

#[test]
fn exploding_learning_rate_reports_epoch_and_step() {
    let pairs = corpus(60);
    let mut run = tiny_run(3);
    run.train.learning_rate = 1e300;
    run.train.warmup_steps = 0;
    match train(&pairs, &run, Objective::Combined, |_| {}) {
        Err(Error::Training { epoch, step, .. }) => assert!(epoch >= 1 && step >= 1),
        other => panic!("expected a training error, got {other:?}"),
    }
}
