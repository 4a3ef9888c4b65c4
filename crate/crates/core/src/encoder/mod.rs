//! Mini post-LN bidirectional transformer encoder with a tied MLM head.
//!
//! Positions excluded by the `attendable` mask are dropped before the first
//! layer: they contribute no keys or values, receive no gradient, and their
//! output rows are zero.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use params::{EncoderConfig, LayerParams, ModelParams, ParamId};

use rand::Rng;
use rayon::prelude::*;

use crate::corpus::ParallelPair;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::tokenize::{pack_text_pair, PackedExample, Vocab};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Inverted dropout applied during training forwards.
pub struct Dropout<'r, R: Rng + ?Sized> {
    pub rate: f64,
    pub rng: &'r mut R,
}

impl<R: Rng + ?Sized> Dropout<'_, R> {
    fn mask(&mut self, len: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..len)
            .map(|_| {
                if self.rng.random_bool(keep) {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Handles to every parameter on one tape, created once per tape.
pub(crate) struct ParamVars(Vec<Var>);

impl ParamVars {
    pub(crate) fn register(tape: &mut Tape<'_>, params: &ModelParams) -> Self {
        ParamVars((0..params.tensors().len()).map(|i| tape.param(i)).collect())
    }

    fn get(&self, id: ParamId) -> Var {
        self.0[id.resolve(self.0.len())]
    }
}

/// Result of encoding one packed sequence on a tape.
pub(crate) struct Encoded {
    /// Sequence positions that were attendable, ascending; row `k` of
    /// `hidden` belongs to `positions[k]`.
    pub positions: Vec<usize>,
    pub hidden: Var,
    pub attention: Vec<Var>,
}

impl Encoded {
    pub(crate) fn row_of(&self, pos: usize) -> Option<usize> {
        self.positions.binary_search(&pos).ok()
    }
}

fn check_inputs(
    cfg: &EncoderConfig,
    ids: &[usize],
    segment_ids: &[usize],
    attendable: &[bool],
) -> Result<()> {
    if ids.len() != segment_ids.len() || ids.len() != attendable.len() {
        return Err(Error::InvalidArgument(
            "ids, segment_ids and attendable must have equal length".into(),
        ));
    }
    if ids.len() > cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} exceeds max_len {}",
            ids.len(),
            cfg.max_len
        )));
    }
    if !attendable.iter().any(|&a| a) {
        return Err(Error::InvalidArgument("no attendable position".into()));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {id} out of vocabulary"
        )));
    }
    if segment_ids.iter().any(|&s| s > 1) {
        return Err(Error::InvalidArgument("segment id must be 0 or 1".into()));
    }
    Ok(())
}

pub(crate) fn encode_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    params: &ModelParams,
    ids: &[usize],
    segment_ids: &[usize],
    attendable: &[bool],
    mut dropout: Option<Dropout<'_, R>>,
) -> Result<Encoded> {
    let cfg = params.config();
    check_inputs(cfg, ids, segment_ids, attendable)?;
    let positions: Vec<usize> = (0..ids.len()).filter(|&p| attendable[p]).collect();
    let tok_ids: Vec<usize> = positions.iter().map(|&p| ids[p]).collect();
    let seg_ids: Vec<usize> = positions.iter().map(|&p| segment_ids[p]).collect();

    let tok = tape.gather(vars.get(ParamId::TOKEN_EMBEDDING), &tok_ids);
    let pos = tape.gather(vars.get(ParamId::POSITION_EMBEDDING), &positions);
    let seg = tape.gather(vars.get(ParamId::SEGMENT_EMBEDDING), &seg_ids);
    let mut x = tape.add(tok, pos);
    x = tape.add(x, seg);
    let mut drop = |tape: &mut Tape<'_>, v: Var| match dropout.as_mut() {
        Some(d) if d.rate > 0.0 => {
            let m = d.mask(tape.value(v).len());
            tape.mul_const(v, m)
        }
        _ => v,
    };
    x = drop(tape, x);

    let mut attention = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let p = LayerParams::of(layer);
        let linear = |tape: &mut Tape<'_>, input: Var, w: ParamId, b: ParamId| {
            let y = tape.matmul(input, vars.get(w));
            tape.add_bias(y, vars.get(b))
        };
        let q = linear(tape, x, p.query_w, p.query_b);
        let k = linear(tape, x, p.key_w, p.key_b);
        let v = linear(tape, x, p.value_w, p.value_b);
        let attn = tape.attention(q, k, v, cfg.n_heads);
        attention.push(attn);
        let mut o = linear(tape, attn, p.output_w, p.output_b);
        o = drop(tape, o);
        let res = tape.add(x, o);
        let h = tape.layer_norm(
            res,
            vars.get(p.attn_norm_gamma),
            vars.get(p.attn_norm_beta),
            LAYER_NORM_EPS,
        );
        let f1 = linear(tape, h, p.ffn_in_w, p.ffn_in_b);
        let f1 = tape.gelu(f1);
        let mut f2 = linear(tape, f1, p.ffn_out_w, p.ffn_out_b);
        f2 = drop(tape, f2);
        let res = tape.add(h, f2);
        x = tape.layer_norm(
            res,
            vars.get(p.ffn_norm_gamma),
            vars.get(p.ffn_norm_beta),
            LAYER_NORM_EPS,
        );
    }
    Ok(Encoded {
        positions,
        hidden: x,
        attention,
    })
}

/// Tied MLM head over the rows of `hidden`.
pub(crate) fn mlm_head_on_tape(tape: &mut Tape<'_>, vars: &ParamVars, hidden: Var) -> Var {
    let normed = tape.layer_norm(
        hidden,
        vars.get(ParamId::MLM_NORM_GAMMA),
        vars.get(ParamId::MLM_NORM_BETA),
        LAYER_NORM_EPS,
    );
    let logits = tape.matmul_bt(normed, vars.get(ParamId::TOKEN_EMBEDDING));
    tape.add_bias(logits, vars.get(ParamId::MLM_BIAS))
}

/// Eval-mode forward. Returns `[len, d_model]` hidden states; rows of
/// non-attendable positions are zero.
pub fn forward(
    params: &ModelParams,
    ids: &[usize],
    segment_ids: &[usize],
    attendable: &[bool],
) -> Result<Tensor> {
    let mut tape = Tape::new(params.tensors());
    let vars = ParamVars::register(&mut tape, params);
    let enc = encode_on_tape::<rand::rngs::ThreadRng>(
        &mut tape,
        &vars,
        params,
        ids,
        segment_ids,
        attendable,
        None,
    )?;
    let d = params.config().d_model;
    let compact = tape.value(enc.hidden);
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (k, &p) in enc.positions.iter().enumerate() {
        out.row_mut(p).copy_from_slice(compact.row(k));
    }
    Ok(out)
}

/// Per-layer attention probabilities of an eval-mode forward.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub positions: Vec<usize>,
    pub heads: usize,
    /// `heads × n × n` with `n = positions.len()`.
    pub probs: Vec<f64>,
}

pub fn attention_maps(
    params: &ModelParams,
    ids: &[usize],
    segment_ids: &[usize],
    attendable: &[bool],
) -> Result<Vec<AttentionMap>> {
    let mut tape = Tape::new(params.tensors());
    let vars = ParamVars::register(&mut tape, params);
    let enc = encode_on_tape::<rand::rngs::ThreadRng>(
        &mut tape,
        &vars,
        params,
        ids,
        segment_ids,
        attendable,
        None,
    )?;
    Ok(enc
        .attention
        .iter()
        .map(|&a| {
            let (heads, probs) = tape.attention_probs(a).expect("attention node");
            AttentionMap {
                positions: enc.positions.clone(),
                heads,
                probs: probs.to_vec(),
            }
        })
        .collect())
}

/// `layer_norm(hidden) · token_embeddingᵀ + bias`, one row per hidden row.
pub fn mlm_logits(hidden: &Tensor, params: &ModelParams) -> Tensor {
    let mut tape = Tape::new(params.tensors());
    let vars = ParamVars::register(&mut tape, params);
    let h = tape.constant(hidden.clone());
    let logits = mlm_head_on_tape(&mut tape, &vars, h);
    tape.value(logits).clone()
}

pub fn cls_embedding(hidden: &Tensor, cls_pos: usize) -> Result<Vec<f64>> {
    if cls_pos >= hidden.rows() {
        return Err(Error::InvalidArgument(format!(
            "cls position {cls_pos} out of bounds for {} rows",
            hidden.rows()
        )));
    }
    Ok(hidden.row(cls_pos).to_vec())
}

/// Maps a context [CLS] embedding to a prediction of the target embedding.
pub trait Predictor: Send + Sync {
    fn predict(&self, z: &[f64]) -> Vec<f64>;

    /// Pulls `grad_out` (w.r.t. the prediction) back to the input.
    fn backward(&self, z: &[f64], grad_out: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPredictor;

impl Predictor for IdentityPredictor {
    fn predict(&self, z: &[f64]) -> Vec<f64> {
        z.to_vec()
    }

    fn backward(&self, _z: &[f64], grad_out: &[f64]) -> Vec<f64> {
        grad_out.to_vec()
    }
}

/// Eval-mode [CLS] embeddings of the two occluded passes over one packed pair.
pub fn occluded_cls_pair(
    params: &ModelParams,
    example: &PackedExample,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let masks = crate::tokenize::build_alignment_masks(example);
    let ha = forward(params, &example.ids, &example.segment_ids, &masks.mask_a)?;
    let hb = forward(params, &example.ids, &example.segment_ids, &masks.mask_b)?;
    Ok((
        cls_embedding(&ha, example.cls_a_pos)?,
        cls_embedding(&hb, example.cls_b_pos)?,
    ))
}

/// Eval-mode [CLS] output at `cls_pos` under `attendable`, with the dense
/// parameter gradient of `⟨upstream, cls⟩`.
pub fn cls_output_and_gradient(
    params: &ModelParams,
    example: &PackedExample,
    attendable: &[bool],
    cls_pos: usize,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    if upstream.len() != params.config().d_model {
        return Err(Error::InvalidArgument(format!(
            "upstream gradient has {} entries, d_model is {}",
            upstream.len(),
            params.config().d_model
        )));
    }
    let mut tape = Tape::new(params.tensors());
    let vars = ParamVars::register(&mut tape, params);
    let enc = encode_on_tape::<rand::rngs::ThreadRng>(
        &mut tape,
        &vars,
        params,
        &example.ids,
        &example.segment_ids,
        attendable,
        None,
    )?;
    let row = enc
        .row_of(cls_pos)
        .ok_or_else(|| Error::InvalidArgument(format!("position {cls_pos} is not attendable")))?;
    let cls = tape.select_rows(enc.hidden, &[row]);
    let value = tape.value(cls).row(0).to_vec();
    let grads = tape.backward(&[(cls, Tensor::vector(upstream.to_vec()))]);
    Ok((value, grads.into_dense(params.tensors())))
}

/// Occluded-pass [CLS] embeddings for many packed pairs, as `[n, d_model]`
/// matrices in input order.
pub fn occluded_embeddings(
    params: &ModelParams,
    examples: &[PackedExample],
) -> Result<(Tensor, Tensor)> {
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = examples
        .par_iter()
        .map(|ex| occluded_cls_pair(params, ex))
        .collect::<Result<_>>()?;
    let (za, zb): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok((Tensor::from_rows(&za)?, Tensor::from_rows(&zb)?))
}

/// Trained parameters together with the vocabulary they were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub vocab: Vocab,
}

impl Model {
    pub fn pack(&self, pair: &ParallelPair) -> Result<PackedExample> {
        pack_text_pair(&self.vocab, pair, self.params.config().max_len)
    }

    /// Occluded-pass [CLS] embeddings of both sides of every pair.
    pub fn embed_pairs(&self, pairs: &[ParallelPair]) -> Result<(Tensor, Tensor)> {
        let packed: Vec<PackedExample> =
            pairs.iter().map(|p| self.pack(p)).collect::<Result<_>>()?;
        occluded_embeddings(&self.params, &packed)
    }
}

#[cfg(test)]
mod tests;
