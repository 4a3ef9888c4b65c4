//! Three-pass training: a joint MLM pass over the corrupted packed pair,
//! then one occluded pass per segment whose [CLS] outputs are aligned.

mod config;
mod metrics;
mod optim;

pub use config::{CorpusSettings, ModelShape, RunConfig, TrainConfig};
pub use metrics::{record_line, EpochRecord, LossTriple, MetricsLog};
pub use optim::{adamw_step, lr_schedule, AdamWHyper, AdamWState};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{eligible_indices, ParallelPair};
use crate::diagnostics;
use crate::encoder::{
    encode_on_tape, mlm_head_on_tape, occluded_embeddings, Dropout, IdentityPredictor, Model,
    ModelParams, ParamVars, Predictor,
};
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};
use crate::objective::{combined_loss, AlignmentBatch, StepLosses};
use crate::tokenize::{
    apply_mlm_corruption, build_alignment_masks, pack_text_pair, MlmTarget, PackedExample, Vocab,
};

const SHUFFLE_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;
const EVAL_SALT: u64 = 0x5eed_e7a1_0000_0001;
const RANKME_EPS: f64 = 1e-12;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic 90/10 split: the `n / 10` indices with the smallest hash
/// form the validation set. Both lists are ascending.
pub fn split_train_validation(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by_key(|&i| (splitmix64(i as u64), i));
    let mut val = ranked[..n / 10].to_vec();
    let mut train = ranked[n / 10..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Consecutive batches of `batch_size`; a trailing batch of one joins the previous batch.
pub fn batch_ranges(len: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..len)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(len))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// MLM plus λ-weighted alignment.
    Combined,
    /// MLM alone; the alignment passes are never run.
    MlmOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: AdamWState,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let optimizer = AdamWState::new(params.tensors());
        TrainState { params, optimizer }
    }

    pub fn steps_taken(&self) -> u64 {
        self.optimizer.t
    }
}

/// MLM corruption for a batch, drawn in example order.
pub fn corrupt_batch<R: Rng + ?Sized>(
    batch: &[&PackedExample],
    mask_prob: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Vec<MlmTarget> {
    batch
        .iter()
        .map(|ex| apply_mlm_corruption(ex, mask_prob, vocab_size, rng))
        .collect()
}

fn label_count(targets: &[MlmTarget]) -> usize {
    targets.iter().map(|t| t.label_positions.len()).sum()
}

struct AlignmentPass<'p> {
    tape: Tape<'p>,
    cls: Var,
}

impl AlignmentPass<'_> {
    fn embedding(&self) -> &[f64] {
        self.tape.value(self.cls).row(0)
    }
}

fn alignment_pass<'p>(
    params: &'p ModelParams,
    ex: &PackedExample,
    mask: &[bool],
    cls_pos: usize,
) -> Result<AlignmentPass<'p>> {
    let mut tape = Tape::new(params.tensors());
    let vars = ParamVars::register(&mut tape, params);
    let enc = encode_on_tape::<ChaCha8Rng>(
        &mut tape,
        &vars,
        params,
        &ex.ids,
        &ex.segment_ids,
        mask,
        None,
    )?;
    let row = enc
        .row_of(cls_pos)
        .ok_or_else(|| Error::InvalidArgument("[CLS] position occluded".into()))?;
    let cls = tape.select_rows(enc.hidden, &[row]);
    Ok(AlignmentPass { tape, cls })
}

/// Summed MLM cross-entropy of one example and its gradient scaled by `seed_scale`.
fn mlm_pass(
    params: &ModelParams,
    ex: &PackedExample,
    target: &MlmTarget,
    dropout_rng: Option<&mut ChaCha8Rng>,
    seed_scale: Option<f64>,
) -> Result<(f64, Option<Gradients>)> {
    if target.label_positions.is_empty() {
        return Ok((0.0, None));
    }
    let mut tape = Tape::new(params.tensors());
    let vars = ParamVars::register(&mut tape, params);
    let rate = params.config().dropout;
    let dropout = dropout_rng
        .filter(|_| rate > 0.0)
        .map(|rng| Dropout { rate, rng });
    let enc = encode_on_tape(
        &mut tape,
        &vars,
        params,
        &target.corrupted_ids,
        &ex.segment_ids,
        &ex.padding_mask,
        dropout,
    )?;
    let rows: Vec<usize> = target
        .label_positions
        .iter()
        .map(|&p| enc.row_of(p).expect("labels sit on real tokens"))
        .collect();
    let hidden = tape.select_rows(enc.hidden, &rows);
    let logits = mlm_head_on_tape(&mut tape, &vars, hidden);
    let pairs: Vec<(usize, usize)> = target.labels.iter().copied().enumerate().collect();
    let ce = tape.cross_entropy(logits, &pairs);
    let value = tape.value(ce).data()[0];
    let grads = seed_scale.map(|s| tape.backward(&[(ce, Tensor::scalar(s))]));
    Ok((value, grads))
}

/// Loss and parameter gradients of one batch with fixed corruption and dropout.
///
/// Dropout masks come from `dropout_seed` with one stream per example, so the
/// result does not depend on how the examples are scheduled across threads.
pub fn batch_loss_and_gradients(
    params: &ModelParams,
    batch: &[&PackedExample],
    targets: &[MlmTarget],
    cfg: &TrainConfig,
    dropout_seed: u64,
    objective: Objective,
    predictor: &dyn Predictor,
) -> Result<(StepLosses, Gradients)> {
    if batch.len() != targets.len() {
        return Err(Error::InvalidArgument(
            "one MLM target per example required".into(),
        ));
    }
    if batch.len() < 2 && objective == Objective::Combined {
        return Err(Error::InvalidArgument(
            "batch needs at least 2 pairs".into(),
        ));
    }
    let n_labels = label_count(targets);
    if n_labels == 0 {
        return Err(Error::DegenerateBatch("no MLM labels in batch".into()));
    }
    let scale = 1.0 / n_labels as f64;
    let with_alignment = objective == Objective::Combined;

    type PerExample<'p> = (
        f64,
        Option<Gradients>,
        Option<(AlignmentPass<'p>, AlignmentPass<'p>)>,
    );
    let per_example: Vec<PerExample<'_>> = batch
        .par_iter()
        .zip(targets.par_iter())
        .enumerate()
        .map(|(i, (ex, target))| {
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            rng.set_stream(i as u64);
            let (ce, grads) = mlm_pass(params, ex, target, Some(&mut rng), Some(scale))?;
            let align = if with_alignment {
                let masks = build_alignment_masks(ex);
                Some((
                    alignment_pass(params, ex, &masks.mask_a, ex.cls_a_pos)?,
                    alignment_pass(params, ex, &masks.mask_b, ex.cls_b_pos)?,
                ))
            } else {
                None
            };
            Ok((ce, grads, align))
        })
        .collect::<Result<_>>()?;

    let n_params = params.tensors().len();
    let mut total = Gradients::empty(n_params);
    let mut ce_sum = 0.0;
    for (ce, grads, _) in &per_example {
        ce_sum += ce;
        if let Some(g) = grads {
            total.add_scaled(1.0, g);
        }
    }
    let mlm = ce_sum * scale;

    if !with_alignment {
        return Ok((combined_loss(mlm, 0.0, 0.0), total));
    }

    let passes: Vec<&(AlignmentPass<'_>, AlignmentPass<'_>)> = per_example
        .iter()
        .map(|(_, _, a)| a.as_ref().expect("alignment ran"))
        .collect();
    let raw_a: Vec<Vec<f64>> = passes.iter().map(|(a, _)| a.embedding().to_vec()).collect();
    let z_a: Vec<Vec<f64>> = raw_a.iter().map(|z| predictor.predict(z)).collect();
    let z_b: Vec<Vec<f64>> = passes.iter().map(|(_, b)| b.embedding().to_vec()).collect();
    let align = cfg.alignment_loss.evaluate(&AlignmentBatch {
        z_a: Tensor::from_rows(&z_a)?,
        z_b: Tensor::from_rows(&z_b)?,
        temperature: cfg.temperature,
    })?;

    if cfg.lambda != 0.0 {
        let lambda = cfg.lambda;
        let align_grads: Vec<Gradients> = passes
            .par_iter()
            .enumerate()
            .map(|(i, (pa, pb))| {
                let ga = predictor.backward(&raw_a[i], align.grad_a.row(i));
                let ga = Tensor::vector(ga.iter().map(|g| lambda * g).collect());
                let gb = Tensor::vector(align.grad_b.row(i).iter().map(|g| lambda * g).collect());
                let mut g = pa.tape.backward(&[(pa.cls, ga)]);
                g.add_scaled(1.0, &pb.tape.backward(&[(pb.cls, gb)]));
                g
            })
            .collect();
        for g in &align_grads {
            total.add_scaled(1.0, g);
        }
    }
    Ok((combined_loss(mlm, align.value, cfg.lambda), total))
}

fn step_with(
    state: &mut TrainState,
    batch: &[&PackedExample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    objective: Objective,
) -> Result<StepLosses> {
    let vocab_size = state.params.config().vocab_size;
    let mut targets = corrupt_batch(batch, cfg.mask_prob, vocab_size, rng);
    if label_count(&targets) == 0 {
        targets = corrupt_batch(batch, cfg.mask_prob, vocab_size, rng);
        if label_count(&targets) == 0 {
            return Err(Error::DegenerateBatch(
                "MLM corruption selected no positions twice in a row".into(),
            ));
        }
    }
    let dropout_seed = rng.next_u64();
    let (losses, grads) = batch_loss_and_gradients(
        &state.params,
        batch,
        &targets,
        cfg,
        dropout_seed,
        objective,
        &IdentityPredictor,
    )?;
    if !losses.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {losses:?}")));
    }
    let lr = lr_schedule(state.optimizer.t + 1, cfg.warmup_steps, cfg.learning_rate);
    let dense = grads.into_dense(state.params.tensors());
    adamw_step(
        state.params.tensors_mut(),
        &dense,
        &mut state.optimizer,
        lr,
        &cfg.adamw(),
    )?;
    Ok(losses)
}

/// One optimization step on the combined objective.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&PackedExample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    step_with(state, batch, cfg, rng, Objective::Combined)
}

/// One optimization step on the MLM objective alone.
pub fn train_step_mlm_only(
    state: &mut TrainState,
    batch: &[&PackedExample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    step_with(state, batch, cfg, rng, Objective::MlmOnly)
}

/// Validation losses plus the occluded [CLS] embeddings they were computed from.
#[derive(Debug, Clone)]
pub struct ValidationResult {
    pub losses: StepLosses,
    pub z_a: Tensor,
    pub z_b: Tensor,
}

/// Eval-mode losses over `examples` in batches of `cfg.batch_size`, with a
/// corruption seed fixed by `cfg.seed`.
pub fn evaluate_validation(
    params: &ModelParams,
    examples: &[PackedExample],
    cfg: &TrainConfig,
) -> Result<ValidationResult> {
    if examples.len() < 2 {
        return Err(Error::InvalidArgument(
            "validation needs at least 2 pairs".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_SALT);
    let refs: Vec<&PackedExample> = examples.iter().collect();
    let targets = corrupt_batch(&refs, cfg.mask_prob, params.config().vocab_size, &mut rng);
    let n_labels = label_count(&targets);
    if n_labels == 0 {
        return Err(Error::DegenerateBatch(
            "validation corruption selected no positions".into(),
        ));
    }
    let ce: Vec<f64> = refs
        .par_iter()
        .zip(targets.par_iter())
        .map(|(ex, t)| mlm_pass(params, ex, t, None, None).map(|(v, _)| v))
        .collect::<Result<_>>()?;
    let mlm = ce.iter().sum::<f64>() / n_labels as f64;

    let (z_a, z_b) = occluded_embeddings(params, examples)?;
    let ranges = batch_ranges(examples.len(), cfg.batch_size);
    let mut align_sum = 0.0;
    for r in &ranges {
        let rows = |z: &Tensor| -> Result<Tensor> {
            let v: Vec<Vec<f64>> = r.clone().map(|i| z.row(i).to_vec()).collect();
            Tensor::from_rows(&v)
        };
        let za: Vec<Vec<f64>> = r
            .clone()
            .map(|i| IdentityPredictor.predict(z_a.row(i)))
            .collect();
        align_sum += cfg
            .alignment_loss
            .evaluate(&AlignmentBatch {
                z_a: Tensor::from_rows(&za)?,
                z_b: rows(&z_b)?,
                temperature: cfg.temperature,
            })?
            .value;
    }
    let alignment = align_sum / ranges.len() as f64;
    Ok(ValidationResult {
        losses: combined_loss(mlm, alignment, cfg.lambda),
        z_a,
        z_b,
    })
}

/// Packs every pair, naming the first pair that does not fit.
pub fn pack_corpus(
    vocab: &Vocab,
    pairs: &[ParallelPair],
    indices: &[usize],
    max_len: usize,
) -> Result<Vec<PackedExample>> {
    indices
        .iter()
        .map(|&i| {
            pack_text_pair(vocab, &pairs[i], max_len).map_err(|e| match e {
                Error::Truncation { .. } => Error::Config(format!("pair {i}: {e}")),
                other => other,
            })
        })
        .collect()
}

/// Train/validation indices of `corpus` usable under `cfg.mode`.
pub fn mode_split(corpus: &[ParallelPair], cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let eligible = eligible_indices(corpus, cfg.mode);
    let mut ok = vec![false; corpus.len()];
    for i in eligible {
        ok[i] = true;
    }
    let (train, val) = split_train_validation(corpus.len());
    (
        train.into_iter().filter(|&i| ok[i]).collect(),
        val.into_iter().filter(|&i| ok[i]).collect(),
    )
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: MetricsLog,
    pub state: TrainState,
}

/// Full training run. `on_epoch` sees each record as soon as it is complete.
pub fn train(
    corpus: &[ParallelPair],
    run: &RunConfig,
    objective: Objective,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    run.validate()?;
    let cfg = &run.train;
    let corpus = match run.corpus.max_pairs {
        Some(m) => &corpus[..m.min(corpus.len())],
        None => corpus,
    };
    if corpus.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    let vocab = Vocab::build(corpus);
    let enc_cfg = run.encoder.with_vocab(vocab.len());
    let params = ModelParams::init(enc_cfg.clone(), cfg.seed)?;
    let mut state = TrainState::new(params);
    let mut metrics = MetricsLog::default();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model: Model {
                params: state.params.clone(),
                vocab,
            },
            metrics,
            state,
        });
    }

    let (train_idx, val_idx) = mode_split(corpus, cfg);
    if train_idx.len() < 2 {
        return Err(Error::Config(format!(
            "{} training pairs usable in {} mode; need at least 2",
            train_idx.len(),
            cfg.mode
        )));
    }
    if val_idx.len() < 2 {
        return Err(Error::Config(format!(
            "{} validation pairs usable in {} mode; need at least 2",
            val_idx.len(),
            cfg.mode
        )));
    }
    let train_ex = pack_corpus(&vocab, corpus, &train_idx, enc_cfg.max_len)?;
    let val_ex = pack_corpus(&vocab, corpus, &val_idx, enc_cfg.max_len)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut step_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    step_rng.set_stream(STEP_STREAM);

    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossTriple::default();
        let ranges = batch_ranges(order.len(), cfg.batch_size);
        for (step, r) in ranges.iter().enumerate() {
            let batch: Vec<&PackedExample> =
                order[r.clone()].iter().map(|&i| &train_ex[i]).collect();
            let losses =
                step_with(&mut state, &batch, cfg, &mut step_rng, objective).map_err(|e| {
                    Error::Training {
                        epoch,
                        step: step + 1,
                        source: Box::new(e),
                    }
                })?;
            sums.mlm += losses.mlm;
            sums.alignment += losses.alignment;
        }
        let n = ranges.len() as f64;
        let lambda = if objective == Objective::Combined {
            cfg.lambda
        } else {
            0.0
        };
        let train_losses = LossTriple::new(sums.mlm / n, sums.alignment / n, lambda);

        let val =
            evaluate_validation(&state.params, &val_ex, cfg).map_err(|e| Error::Training {
                epoch,
                step: ranges.len(),
                source: Box::new(e),
            })?;
        let stacked = diagnostics::stack_rows(&val.z_a, &val.z_b)?;
        let spectrum = diagnostics::spectrum_report(&stacked, RANKME_EPS)?;
        let (pos, neg) = diagnostics::mean_positive_negative_cosine(&val.z_a, &val.z_b)?;
        let record = EpochRecord {
            epoch,
            steps: state.steps_taken(),
            train: train_losses,
            validation: LossTriple::new(val.losses.mlm, val.losses.alignment, cfg.lambda),
            rankme: spectrum.rankme,
            first_component_share: spectrum.first_component_share,
            mean_positive_cosine: pos,
            mean_negative_cosine: neg,
        };
        on_epoch(&record);
        metrics.records.push(record);
    }
    Ok(TrainOutcome {
        model: Model {
            params: state.params.clone(),
            vocab,
        },
        metrics,
        state,
    })
}

#[cfg(test)]
mod tests;
