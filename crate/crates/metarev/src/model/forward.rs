//! Graph construction for the encoder and decoder.
//!
//! One training step records a fresh [`Tape`]: parameters are bound as
//! tape variables ([`bind_model`]), the forward graph is built, and a
//! single backward sweep yields gradients addressed by parameter name.
//! Evaluation reuses the same builders without calling backward, so there
//! is exactly one implementation of the forward math.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::assembly::{AssembledInput, BOS};
use crate::autograd::{Gradients, Matrix, Tape, Var};
use crate::model::attention::{BlockPlan, BlockSparseAttnOp};
use crate::model::{Model, ModelConfig, ModelError};

/// Parameter tensors registered on a tape, addressed by name.
pub struct BoundModel {
    vars: IndexMap<String, Var>,
}

impl BoundModel {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collect gradients per parameter name (zeros for untouched tensors).
    pub fn named_grads(&self, model: &Model, grads: &Gradients) -> IndexMap<String, Matrix> {
        self.vars
            .iter()
            .map(|(name, var)| {
                let shape = model.params.get(name).dim();
                (name.clone(), grads.get_or_zeros(*var, shape))
            })
            .collect()
    }
}

/// Register every model parameter on the tape.
pub fn bind_model(tape: &mut Tape, model: &Model) -> BoundModel {
    let vars = model
        .params
        .iter()
        .map(|(name, value)| (name.clone(), tape.param(value.clone())))
        .collect();
    BoundModel { vars }
}

/// Dropout state for training-mode graphs. Masks are constants on the tape,
/// so gradients flow through the kept positions only.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn apply_dropout(tape: &mut Tape, x: Var, drop: Option<&mut DropoutCtx<'_>>) -> Var {
    let Some(ctx) = drop else {
        return x;
    };
    if ctx.rate == 0.0 {
        return x;
    }
    let keep = 1.0 - ctx.rate;
    let dim = tape.value(x).dim();
    let mask = Matrix::from_shape_fn(dim, |_| {
        if ctx.rng.random_range(0.0..1.0) < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    tape.mul_mask(x, Arc::new(mask))
}

fn layer_norm(tape: &mut Tape, bound: &BoundModel, prefix: &str, x: Var) -> Var {
    let gamma = bound.var(&format!("{prefix}.gamma"));
    let beta = bound.var(&format!("{prefix}.beta"));
    tape.layer_norm(x, gamma, beta, 1e-5)
}

fn feed_forward(tape: &mut Tape, bound: &BoundModel, base: &str, x: Var) -> Var {
    let w1 = bound.var(&format!("{base}.ffn.w1"));
    let b1 = bound.var(&format!("{base}.ffn.b1"));
    let w2 = bound.var(&format!("{base}.ffn.w2"));
    let b2 = bound.var(&format!("{base}.ffn.b2"));
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let out = tape.matmul(h, w2);
    tape.add_row(out, b2)
}

/// Multi-head attention with dense logits (decoder self- and cross-attention).
/// `mask` is an additive constant (0 or -inf) applied before the softmax.
fn dense_attention(
    tape: &mut Tape,
    bound: &BoundModel,
    config: &ModelConfig,
    base: &str,
    x_q: Var,
    x_kv: Var,
    mask: Option<Arc<Matrix>>,
) -> Var {
    let scale = 1.0 / (config.d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let wq = bound.var(&format!("{base}.h{h}.wq"));
        let wk = bound.var(&format!("{base}.h{h}.wk"));
        let wv = bound.var(&format!("{base}.h{h}.wv"));
        let q = tape.matmul(x_q, wq);
        let k = tape.matmul(x_kv, wk);
        let v = tape.matmul(x_kv, wv);
        let scores = tape.matmul_t(q, k, false, true);
        let scaled = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scaled, mask.clone());
        heads.push(tape.matmul(probs, v));
    }
    let concat = tape.concat_cols(&heads);
    let wo = bound.var(&format!("{base}.wo"));
    tape.matmul(concat, wo)
}

/// Multi-head relation-sparse attention (encoder self-attention).
fn relation_attention(
    tape: &mut Tape,
    bound: &BoundModel,
    config: &ModelConfig,
    base: &str,
    x: Var,
    plan: &Arc<BlockPlan>,
) -> Var {
    let mut heads = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let wq = bound.var(&format!("{base}.h{h}.wq"));
        let wk = bound.var(&format!("{base}.h{h}.wk"));
        let wv = bound.var(&format!("{base}.h{h}.wv"));
        let beta = bound.var(&format!("{base}.h{h}.beta"));
        let q = tape.matmul(x, wq);
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        let out = tape.custom(
            &[q, k, v, beta],
            Arc::new(BlockSparseAttnOp {
                plan: Arc::clone(plan),
            }),
        );
        heads.push(out);
    }
    let concat = tape.concat_cols(&heads);
    let wo = bound.var(&format!("{base}.wo"));
    tape.matmul(concat, wo)
}

fn embed(
    tape: &mut Tape,
    bound: &BoundModel,
    token_ids: &[usize],
    pos_table: &str,
) -> Var {
    let tok_table = bound.var("emb.tok");
    let pos_table = bound.var(pos_table);
    let ids = Arc::new(token_ids.to_vec());
    let positions = Arc::new((0..token_ids.len()).collect::<Vec<usize>>());
    let tok = tape.gather_rows(tok_table, ids);
    let pos = tape.gather_rows(pos_table, positions);
    tape.add(tok, pos)
}

/// Encoder stack over an assembled input. Returns the final per-token
/// embedding matrix (as a tape variable).
pub fn encoder_graph(
    tape: &mut Tape,
    bound: &BoundModel,
    config: &ModelConfig,
    token_ids: &[usize],
    plan: &Arc<BlockPlan>,
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> Var {
    let mut x = embed(tape, bound, token_ids, "emb.pos_enc");
    x = apply_dropout(tape, x, drop.as_deref_mut());
    for l in 0..config.n_enc_layers {
        let base = format!("enc.l{l}");
        let attn = relation_attention(tape, bound, config, &format!("{base}.attn"), x, plan);
        let attn = apply_dropout(tape, attn, drop.as_deref_mut());
        let res = tape.add(x, attn);
        x = layer_norm(tape, bound, &format!("{base}.ln1"), res);
        let ffn = feed_forward(tape, bound, &base, x);
        let ffn = apply_dropout(tape, ffn, drop.as_deref_mut());
        let res = tape.add(x, ffn);
        x = layer_norm(tape, bound, &format!("{base}.ln2"), res);
    }
    x
}

/// Strictly-upper-triangular -inf mask: position `t` sees positions `<= t`.
pub fn causal_mask(len: usize) -> Matrix {
    Matrix::from_shape_fn((len, len), |(i, j)| {
        if j > i {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    })
}

/// Decoder stack over a target prefix. Returns the final hidden states and
/// next-token logits for every prefix position.
pub fn decoder_graph(
    tape: &mut Tape,
    bound: &BoundModel,
    config: &ModelConfig,
    prefix: &[usize],
    h_e: Var,
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> (Var, Var) {
    let causal = Arc::new(causal_mask(prefix.len()));
    let mut y = embed(tape, bound, prefix, "emb.pos_dec");
    y = apply_dropout(tape, y, drop.as_deref_mut());
    for l in 0..config.n_dec_layers {
        let base = format!("dec.l{l}");
        let self_attn = dense_attention(
            tape,
            bound,
            config,
            &format!("{base}.self"),
            y,
            y,
            Some(Arc::clone(&causal)),
        );
        let self_attn = apply_dropout(tape, self_attn, drop.as_deref_mut());
        let res = tape.add(y, self_attn);
        y = layer_norm(tape, bound, &format!("{base}.ln1"), res);

        let cross = dense_attention(
            tape,
            bound,
            config,
            &format!("{base}.cross"),
            y,
            h_e,
            None,
        );
        let cross = apply_dropout(tape, cross, drop.as_deref_mut());
        let res = tape.add(y, cross);
        y = layer_norm(tape, bound, &format!("{base}.ln2"), res);

        let ffn = feed_forward(tape, bound, &base, y);
        let ffn = apply_dropout(tape, ffn, drop.as_deref_mut());
        let res = tape.add(y, ffn);
        y = layer_norm(tape, bound, &format!("{base}.ln3"), res);
    }
    let w = bound.var("out.w");
    let b = bound.var("out.b");
    let proj = tape.matmul(y, w);
    let logits = tape.add_row(proj, b);
    (y, logits)
}

/// Final encoder embeddings of one input, in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub h_e: Matrix,
}

/// Final decoder embeddings plus next-token logits, in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub h_d: Matrix,
    pub logits: Matrix,
}

/// Evaluation-mode encoder pass (no dropout, no gradients).
pub fn encoder_forward(
    model: &Model,
    input: &AssembledInput,
    relations: &[crate::relations::RelationMatrix],
) -> Result<EncoderOutput, ModelError> {
    if input.len() > model.config.max_in {
        return Err(ModelError::InputTooLong {
            len: input.len(),
            max_in: model.config.max_in,
        });
    }
    let plan = Arc::new(super::attention::build_block_plan(
        relations,
        &input.doc_of_token,
    ));
    encoder_forward_with_plan(model, &input.token_ids, &plan)
}

/// Encoder pass over a prebuilt block plan.
pub fn encoder_forward_with_plan(
    model: &Model,
    token_ids: &[usize],
    plan: &Arc<BlockPlan>,
) -> Result<EncoderOutput, ModelError> {
    if token_ids.len() > model.config.max_in {
        return Err(ModelError::InputTooLong {
            len: token_ids.len(),
            max_in: model.config.max_in,
        });
    }
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, model);
    let h_e = encoder_graph(&mut tape, &bound, &model.config, token_ids, plan, None);
    Ok(EncoderOutput {
        h_e: tape.value(h_e).clone(),
    })
}

/// Evaluation-mode decoder pass over a `<bos>`-led prefix.
pub fn decoder_forward(
    model: &Model,
    prefix: &[usize],
    encoder_output: &EncoderOutput,
) -> Result<DecoderOutput, ModelError> {
    if prefix.first() != Some(&BOS) {
        return Err(ModelError::PrefixMissingBos);
    }
    if prefix.len() > model.config.max_out {
        return Err(ModelError::PrefixTooLong {
            len: prefix.len(),
            max_out: model.config.max_out,
        });
    }
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, model);
    let h_e = tape.constant(encoder_output.h_e.clone());
    let (h_d, logits) = decoder_graph(&mut tape, &bound, &model.config, prefix, h_e, None);
    Ok(DecoderOutput {
        h_d: tape.value(h_d).clone(),
        logits: tape.value(logits).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble_input, Vocab};
    use crate::model::attention::build_block_plan;
    use crate::model::tiny_config;
    use crate::relations::build_all_relations;
    use crate::synth::fixture_forest;

    fn setup() -> (Model, Vocab, AssembledInput, Arc<BlockPlan>) {
        let sample = fixture_forest();
        let vocab = Vocab::build(std::slice::from_ref(&sample), 64).unwrap();
        let assembled = assemble_input(&sample, &vocab, 25).unwrap();
        let relations = build_all_relations(&sample);
        let plan = Arc::new(build_block_plan(&relations, &assembled.doc_of_token));
        let model = Model::init(tiny_config(vocab.len()), 11).unwrap();
        (model, vocab, assembled, plan)
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let (model, _, assembled, plan) = setup();
        let out1 = encoder_forward_with_plan(&model, &assembled.token_ids, &plan).unwrap();
        let out2 = encoder_forward_with_plan(&model, &assembled.token_ids, &plan).unwrap();
        assert_eq!(out1.h_e.dim(), (assembled.len(), 8));
        // Evaluation mode is bit-deterministic.
        assert_eq!(out1, out2);
        assert!(out1.h_e.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zeroed_attention_and_ffn_pass_embeddings_through_norms() {
        let (mut model, _, assembled, plan) = setup();
        // Zero everything except the layer norms and embeddings.
        let zero_names: Vec<String> = model
            .params
            .names()
            .filter(|n| n.starts_with("enc.") && !n.contains(".ln"))
            .cloned()
            .collect();
        for name in zero_names {
            let p = model.params.get_mut(&name);
            *p = Matrix::zeros(p.dim());
        }
        let out = encoder_forward_with_plan(&model, &assembled.token_ids, &plan).unwrap();
        assert!(out.h_e.iter().all(|v| v.is_finite()));

        // With attention and ffn zeroed, the encoder reduces to two stacked
        // layer norms over the embeddings.
        let tok = model.params.get("emb.tok");
        let pos = model.params.get("emb.pos_enc");
        let mut x = Matrix::zeros((assembled.len(), 8));
        for (i, &id) in assembled.token_ids.iter().enumerate() {
            for j in 0..8 {
                x[(i, j)] = tok[(id, j)] + pos[(i, j)];
            }
        }
        let ln = |x: &Matrix| -> Matrix {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let d = row.len() as f64;
                let mean = row.sum() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let inv = 1.0 / (var + 1e-5).sqrt();
                row.mapv_inplace(|v| (v - mean) * inv);
            }
            out
        };
        let expected = ln(&ln(&x));
        let diff = (&out.h_e - &expected)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12, "diff {diff}");
    }

    #[test]
    fn input_longer_than_max_in_is_rejected() {
        let (model, _, _, plan) = setup();
        let too_long = vec![crate::assembly::DOC_SEP; model.config.max_in + 1];
        assert!(matches!(
            encoder_forward_with_plan(&model, &too_long, &plan),
            Err(ModelError::InputTooLong { .. })
        ));
    }

    #[test]
    fn decoder_prefix_validation() {
        let (model, _, assembled, plan) = setup();
        let enc = encoder_forward_with_plan(&model, &assembled.token_ids, &plan).unwrap();
        let out = decoder_forward(&model, &[BOS], &enc).unwrap();
        assert_eq!(out.logits.dim(), (1, model.config.vocab_size));
        assert!(matches!(
            decoder_forward(&model, &[7], &enc),
            Err(ModelError::PrefixMissingBos)
        ));
    }

    #[test]
    fn decoder_is_causal() {
        let (model, _, assembled, plan) = setup();
        let enc = encoder_forward_with_plan(&model, &assembled.token_ids, &plan).unwrap();
        let prefix_a = vec![BOS, 7, 8, 9];
        let mut prefix_b = prefix_a.clone();
        prefix_b[3] = 10; // change the last token
        let out_a = decoder_forward(&model, &prefix_a, &enc).unwrap();
        let out_b = decoder_forward(&model, &prefix_b, &enc).unwrap();
        // Logits at positions before the change are identical.
        for t in 0..3 {
            for v in 0..model.config.vocab_size {
                assert_eq!(out_a.logits[(t, v)], out_b.logits[(t, v)], "t={t} v={v}");
            }
        }
        // And the changed position differs somewhere.
        let differs = (0..model.config.vocab_size)
            .any(|v| out_a.logits[(3, v)] != out_b.logits[(3, v)]);
        assert!(differs);
    }

    #[test]
    fn cross_attention_couples_encoder_output() {
        let (model, _, assembled, plan) = setup();
        let enc = encoder_forward_with_plan(&model, &assembled.token_ids, &plan).unwrap();
        let zeroed = EncoderOutput {
            h_e: Matrix::zeros(enc.h_e.dim()),
        };
        let prefix = vec![BOS, 7, 8];
        let with_enc = decoder_forward(&model, &prefix, &enc).unwrap();
        let without = decoder_forward(&model, &prefix, &zeroed).unwrap();
        let diff = (&with_enc.logits - &without.logits)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff > 1e-9, "encoder output does not reach the decoder");
    }

    #[test]
    fn encoder_matches_independent_dense_reference() {
        // Rebuild the whole encoder with the dense masked attention head
        // (pure array math, no tape, no block kernels) and compare.
        let (model, _, assembled, plan) = setup();
        let sample = fixture_forest();
        let relations = build_all_relations(&sample);
        let masks = crate::assembly::extend_relations(&relations, &assembled.doc_of_token);
        let cfg = &model.config;

        let tok = model.params.get("emb.tok");
        let pos = model.params.get("emb.pos_enc");
        let mut x = Matrix::zeros((assembled.len(), cfg.d_model));
        for (i, &id) in assembled.token_ids.iter().enumerate() {
            for j in 0..cfg.d_model {
                x[(i, j)] = tok[(id, j)] + pos[(i, j)];
            }
        }
        let ln = |x: &Matrix, gamma: &Matrix, beta: &Matrix| -> Matrix {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let d = row.len() as f64;
                let mean = row.sum() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let inv = 1.0 / (var + 1e-5).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * inv * gamma[(0, j)] + beta[(0, j)];
                }
            }
            out
        };
        for l in 0..cfg.n_enc_layers {
            let base = format!("enc.l{l}");
            let mut heads = Vec::new();
            for h in 0..cfg.n_heads {
                let q = x.dot(model.params.get(&format!("{base}.attn.h{h}.wq")));
                let k = x.dot(model.params.get(&format!("{base}.attn.h{h}.wk")));
                let v = x.dot(model.params.get(&format!("{base}.attn.h{h}.wv")));
                let betas = model.relation_weights(l, h);
                let out = crate::model::attention::relation_attention_head(
                    &q, &k, &v, &masks, &betas, cfg.d_k,
                )
                .unwrap();
                heads.push(out);
            }
            let mut concat = Matrix::zeros((assembled.len(), cfg.d_model));
            for (h, head) in heads.iter().enumerate() {
                concat
                    .slice_mut(ndarray::s![.., h * cfg.d_k..(h + 1) * cfg.d_k])
                    .assign(head);
            }
            let attn = concat.dot(model.params.get(&format!("{base}.wo")));
            x = ln(
                &(&x + &attn),
                model.params.get(&format!("{base}.ln1.gamma")),
                model.params.get(&format!("{base}.ln1.beta")),
            );
            let h1 = x.dot(model.params.get(&format!("{base}.ffn.w1")))
                + model.params.get(&format!("{base}.ffn.b1"));
            let h1 = h1.mapv(|v| v.max(0.0));
            let ffn = h1.dot(model.params.get(&format!("{base}.ffn.w2")))
                + model.params.get(&format!("{base}.ffn.b2"));
            x = ln(
                &(&x + &ffn),
                model.params.get(&format!("{base}.ln2.gamma")),
                model.params.get(&format!("{base}.ln2.beta")),
            );
        }

        let production = encoder_forward_with_plan(&model, &assembled.token_ids, &plan).unwrap();
        let diff = (&production.h_e - &x)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff <= 1e-6, "max abs diff {diff}");
    }
}
