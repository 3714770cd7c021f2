//! The micro encoder-decoder model.
//!
//! The encoder replaces self-attention with relationship-aware sparse
//! attention computed block by block ([`attention`]); the decoder is a
//! vanilla transformer with causal self-attention and full cross-attention.
//! Every trainable tensor lives in a flat, name-addressed [`ParamStore`],
//! which keeps optimizer state, checkpoints and gradient checks simple.

pub mod attention;
pub mod beam;
pub mod forward;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Matrix;
use crate::relations::RelationKind;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input of {len} tokens exceeds max_in {max_in}")]
    InputTooLong { len: usize, max_in: usize },
    #[error("decoder prefix must start with <bos>")]
    PrefixMissingBos,
    #[error("decoder prefix of {len} tokens exceeds max_out {max_out}")]
    PrefixTooLong { len: usize, max_out: usize },
    #[error(transparent)]
    Attention(#[from] attention::AttnError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_k: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    /// Filled in from the built vocabulary when zero.
    #[serde(default)]
    pub vocab_size: usize,
    pub max_in: usize,
    pub max_out: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model != self.n_heads * self.d_k {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} != n_heads {} * d_k {}",
                self.d_model, self.n_heads, self.d_k
            )));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_in", self.max_in),
            ("max_out", self.max_out),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Parameter groups used by gradient-check reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embeddings,
    Attention,
    RelationWeights,
    FeedForward,
    LayerNorm,
    Heads,
    Output,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Embeddings,
        ParamGroup::Attention,
        ParamGroup::RelationWeights,
        ParamGroup::FeedForward,
        ParamGroup::LayerNorm,
        ParamGroup::Heads,
        ParamGroup::Output,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::Attention => "attention",
            ParamGroup::RelationWeights => "relation_weights",
            ParamGroup::FeedForward => "feed_forward",
            ParamGroup::LayerNorm => "layer_norm",
            ParamGroup::Heads => "heads",
            ParamGroup::Output => "output",
        }
    }
}

/// Classify a parameter name into its group.
pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("emb.") {
        ParamGroup::Embeddings
    } else if name.starts_with("head.") {
        ParamGroup::Heads
    } else if name.starts_with("out.") {
        ParamGroup::Output
    } else if name.ends_with(".beta") && name.contains(".h") {
        ParamGroup::RelationWeights
    } else if name.contains(".ln") {
        ParamGroup::LayerNorm
    } else if name.contains(".ffn.") {
        ParamGroup::FeedForward
    } else {
        ParamGroup::Attention
    }
}

/// Flat, ordered, name-addressed parameter storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, value: Matrix) {
        let existed = self.params.insert(name.clone(), value);
        assert!(existed.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Matrix {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Hash of every parameter name and bit pattern, for determinism checks.
    pub fn content_hash(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for (name, value) in &self.params {
            h = fnv1a64_bytes(h, name.as_bytes());
            for v in value.iter() {
                h = fnv1a64_bytes(h, &v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a64_bytes(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_bytes(FNV_OFFSET, bytes)
}

enum Init {
    Zeros,
    Ones,
    Xavier,
    Embedding,
    /// Uniform over [0.1, 0.3]: the relation balancing weights start small.
    BetaUniform,
}

fn mlp_head_specs(
    prefix: &str,
    d_model: usize,
    out_dim: usize,
) -> Vec<(String, (usize, usize), Init)> {
    vec![
        (format!("{prefix}.w1"), (d_model, d_model), Init::Xavier),
        (format!("{prefix}.b1"), (1, d_model), Init::Zeros),
        (format!("{prefix}.w2"), (d_model, out_dim), Init::Xavier),
        (format!("{prefix}.b2"), (1, out_dim), Init::Zeros),
    ]
}

fn layer_norm_specs(prefix: &str, d_model: usize) -> Vec<(String, (usize, usize), Init)> {
    vec![
        (format!("{prefix}.gamma"), (1, d_model), Init::Ones),
        (format!("{prefix}.beta"), (1, d_model), Init::Zeros),
    ]
}

fn attention_specs(
    prefix: &str,
    config: &ModelConfig,
    with_relation_weights: bool,
) -> Vec<(String, (usize, usize), Init)> {
    let mut specs = Vec::new();
    for h in 0..config.n_heads {
        for w in ["wq", "wk", "wv"] {
            specs.push((
                format!("{prefix}.h{h}.{w}"),
                (config.d_model, config.d_k),
                Init::Xavier,
            ));
        }
        if with_relation_weights {
            specs.push((
                format!("{prefix}.h{h}.beta"),
                (1, RelationKind::COUNT),
                Init::BetaUniform,
            ));
        }
    }
    specs.push((
        format!("{prefix}.wo"),
        (config.d_model, config.d_model),
        Init::Xavier,
    ));
    specs
}

fn ffn_specs(prefix: &str, config: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    vec![
        (format!("{prefix}.ffn.w1"), (config.d_model, config.ffn_dim), Init::Xavier),
        (format!("{prefix}.ffn.b1"), (1, config.ffn_dim), Init::Zeros),
        (format!("{prefix}.ffn.w2"), (config.ffn_dim, config.d_model), Init::Xavier),
        (format!("{prefix}.ffn.b2"), (1, config.d_model), Init::Zeros),
    ]
}

fn param_specs(config: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let d = config.d_model;
    let mut specs = vec![
        ("emb.tok".to_string(), (config.vocab_size, d), Init::Embedding),
        ("emb.pos_enc".to_string(), (config.max_in, d), Init::Embedding),
        ("emb.pos_dec".to_string(), (config.max_out, d), Init::Embedding),
    ];
    for l in 0..config.n_enc_layers {
        let base = format!("enc.l{l}");
        specs.extend(attention_specs(&format!("{base}.attn"), config, true));
        specs.extend(layer_norm_specs(&format!("{base}.ln1"), d));
        specs.extend(ffn_specs(&base, config));
        specs.extend(layer_norm_specs(&format!("{base}.ln2"), d));
    }
    for l in 0..config.n_dec_layers {
        let base = format!("dec.l{l}");
        specs.extend(attention_specs(&format!("{base}.self"), config, false));
        specs.extend(layer_norm_specs(&format!("{base}.ln1"), d));
        specs.extend(attention_specs(&format!("{base}.cross"), config, false));
        specs.extend(layer_norm_specs(&format!("{base}.ln2"), d));
        specs.extend(ffn_specs(&base, config));
        specs.extend(layer_norm_specs(&format!("{base}.ln3"), d));
    }
    specs.push(("out.w".to_string(), (d, config.vocab_size), Init::Xavier));
    specs.push(("out.b".to_string(), (1, config.vocab_size), Init::Zeros));
    specs.extend(mlp_head_specs("head.conf", d, 1));
    specs.extend(mlp_head_specs("head.rating", d, 1));
    specs.extend(mlp_head_specs(
        "head.doctype",
        d,
        crate::conversation::DocType::COUNT,
    ));
    specs.extend(mlp_head_specs(
        "head.accept",
        d,
        crate::conversation::Acceptance::COUNT,
    ));
    specs
}

/// Model: config plus all trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Initialize parameters deterministically.
    ///
    /// Each tensor gets its own stream seeded by `(seed, name)`, so the
    /// values of one parameter never depend on which other parameters
    /// exist. Architectural ablations therefore share initializations for
    /// the tensors they have in common.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, (rows, cols), init) in param_specs(&config) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name.as_bytes()));
            let value = match init {
                Init::Zeros => Matrix::zeros((rows, cols)),
                Init::Ones => Matrix::from_elem((rows, cols), 1.0),
                Init::Xavier => {
                    let std = (2.0 / (rows + cols) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("valid std");
                    Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
                }
                Init::Embedding => {
                    let normal = Normal::new(0.0, 0.02).expect("valid std");
                    Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
                }
                Init::BetaUniform => {
                    Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.1..0.3))
                }
            };
            params.insert(name, value);
        }
        Ok(Model { config, params })
    }

    /// Relation weights of one encoder head.
    pub fn relation_weights(&self, layer: usize, head: usize) -> Vec<f64> {
        self.params
            .get(&format!("enc.l{layer}.attn.h{head}.beta"))
            .row(0)
            .to_vec()
    }

    /// Count of negative relation weights across all encoder heads; no sign
    /// constraint is imposed during training, so this is logged.
    pub fn negative_relation_weights(&self) -> usize {
        let mut count = 0;
        for l in 0..self.config.n_enc_layers {
            for h in 0..self.config.n_heads {
                count += self
                    .relation_weights(l, h)
                    .iter()
                    .filter(|b| **b < 0.0)
                    .count();
            }
        }
        count
    }
}

#[cfg(test)]
pub(crate) fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_k: 4,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        ffn_dim: 16,
        vocab_size,
        max_in: 32,
        max_out: 16,
        dropout_rate: 0.0,
    }
}
