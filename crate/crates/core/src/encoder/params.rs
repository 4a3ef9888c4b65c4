use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const N_SEGMENTS: usize = 2;
const INIT_STD: f64 = 0.02;
const PARAMS_PER_LAYER: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// CPU-sized defaults: 2 layers of width 64, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 32,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 {
            return bad("encoder.vocab_size must be positive".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "encoder.d_model ({}) must be a positive multiple of encoder.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("encoder.n_layers and encoder.d_ff must be positive".into());
        }
        if self.max_len < 4 {
            return bad(format!(
                "encoder.max_len ({}) must be at least 4",
                self.max_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!(
                "encoder.dropout ({}) must lie in [0, 1)",
                self.dropout
            ));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        3 + PARAMS_PER_LAYER * self.n_layers + 3
    }
}

/// Index into [`ModelParams::tensors`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamId {
    pub const TOKEN_EMBEDDING: ParamId = ParamId(0);
    pub const POSITION_EMBEDDING: ParamId = ParamId(1);
    pub const SEGMENT_EMBEDDING: ParamId = ParamId(2);
    pub const MLM_NORM_GAMMA: ParamId = ParamId(usize::MAX - 2);
    pub const MLM_NORM_BETA: ParamId = ParamId(usize::MAX - 1);
    pub const MLM_BIAS: ParamId = ParamId(usize::MAX);

    /// Storage index in a parameter list of length `n`.
    pub fn resolve(self, n: usize) -> usize {
        match self {
            ParamId::MLM_NORM_GAMMA => n - 3,
            ParamId::MLM_NORM_BETA => n - 2,
            ParamId::MLM_BIAS => n - 1,
            ParamId(i) => i,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub key_w: ParamId,
    pub key_b: ParamId,
    pub value_w: ParamId,
    pub value_b: ParamId,
    pub output_w: ParamId,
    pub output_b: ParamId,
    pub attn_norm_gamma: ParamId,
    pub attn_norm_beta: ParamId,
    pub ffn_in_w: ParamId,
    pub ffn_in_b: ParamId,
    pub ffn_out_w: ParamId,
    pub ffn_out_b: ParamId,
    pub ffn_norm_gamma: ParamId,
    pub ffn_norm_beta: ParamId,
}

impl LayerParams {
    pub fn of(layer: usize) -> Self {
        let base = 3 + PARAMS_PER_LAYER * layer;
        let id = |k: usize| ParamId(base + k);
        LayerParams {
            query_w: id(0),
            query_b: id(1),
            key_w: id(2),
            key_b: id(3),
            value_w: id(4),
            value_b: id(5),
            output_w: id(6),
            output_b: id(7),
            attn_norm_gamma: id(8),
            attn_norm_beta: id(9),
            ffn_in_w: id(10),
            ffn_in_b: id(11),
            ffn_out_w: id(12),
            ffn_out_b: id(13),
            ffn_norm_gamma: id(14),
            ffn_norm_beta: id(15),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Name, shape and initializer of every tensor, in storage order.
fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
    let mut out = vec![
        ("embeddings.token".to_string(), vec![v, d], Init::Normal),
        (
            "embeddings.position".to_string(),
            vec![cfg.max_len, d],
            Init::Normal,
        ),
        (
            "embeddings.segment".to_string(),
            vec![N_SEGMENTS, d],
            Init::Normal,
        ),
    ];
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        for proj in ["query", "key", "value", "output"] {
            out.push((
                name(&format!("attention.{proj}.weight")),
                vec![d, d],
                Init::Normal,
            ));
            out.push((
                name(&format!("attention.{proj}.bias")),
                vec![d],
                Init::Zeros,
            ));
        }
        out.push((name("attention_norm.gamma"), vec![d], Init::Ones));
        out.push((name("attention_norm.beta"), vec![d], Init::Zeros));
        out.push((name("ffn.in.weight"), vec![d, f], Init::Normal));
        out.push((name("ffn.in.bias"), vec![f], Init::Zeros));
        out.push((name("ffn.out.weight"), vec![f, d], Init::Normal));
        out.push((name("ffn.out.bias"), vec![d], Init::Zeros));
        out.push((name("ffn_norm.gamma"), vec![d], Init::Ones));
        out.push((name("ffn_norm.beta"), vec![d], Init::Zeros));
    }
    out.push(("mlm.norm.gamma".to_string(), vec![d], Init::Ones));
    out.push(("mlm.norm.beta".to_string(), vec![d], Init::Zeros));
    out.push(("mlm.bias".to_string(), vec![v], Init::Zeros));
    out
}

/// All learnable tensors of the encoder. The MLM output matrix is the token
/// embedding, so it has no tensor of its own.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: EncoderConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            names.push(name);
            tensors.push(Tensor::from_vec(&shape, data)?);
        }
        Ok(ModelParams {
            config,
            names,
            tensors,
        })
    }

    /// Rebuilds from named tensors, checking names and shapes against `config`.
    pub fn from_named(config: EncoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != named.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, shape, _), (got_name, t)) in expected.into_iter().zip(named) {
            if name != got_name || shape != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Numerical(format!("tensor {name} is not finite")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams {
            config,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn resolve(&self, id: ParamId) -> usize {
        id.resolve(self.tensors.len())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[self.resolve(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        let i = self.resolve(id);
        &mut self.tensors[i]
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}
