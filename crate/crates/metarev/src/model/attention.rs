//! Relationship-aware sparse attention.
//!
//! Encoder attention is restricted to token pairs whose documents are
//! connected by at least one relation; allowed logits are scaled by the
//! per-head weighted sum of the relation indicators before the usual
//! `1/sqrt(d_k)` scaling:
//!
//! ```text
//! logit(s, t) = (Q_s . K_t) * sum_j beta_j * R_j[doc(s)][doc(t)] / sqrt(d_k)
//! ```
//!
//! Pairs with no relation at all are excluded from the softmax entirely,
//! so the structural mask is the OR of the relation matrices and is
//! independent of the beta weights; beta only rescales allowed logits.
//!
//! Two implementations are kept deliberately separate:
//! [`relation_attention_head`] materializes token-level masks and serves as
//! the dense reference, while [`block_sparse_attention`] walks allowed
//! document-pair blocks only and never allocates anything proportional to
//! `n_tokens^2`.

use std::sync::Arc;

use thiserror::Error;

use crate::assembly::TokenMask;
use crate::autograd::{softmax_rows_masked, CustomOp, Matrix};
use crate::relations::RelationMatrix;

#[derive(Debug, Error)]
pub enum AttnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("attention row {0} has no allowed positions")]
    EmptyAttentionRow(usize),
}

/// One allowed document pair with the set of relations connecting it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPair {
    pub query_doc: usize,
    pub key_doc: usize,
    /// Bit `j` set means relation `j` (in `RelationKind::ALL` order) holds.
    pub relation_bits: u8,
}

/// Token spans and allowed document pairs for one assembled input.
///
/// The plan depends only on the relation matrices and the token-to-document
/// map, never on the beta weights.
#[derive(Debug, Clone)]
pub struct BlockPlan {
    /// Token range `[start, end)` of each document, in document order.
    pub spans: Vec<(usize, usize)>,
    /// Allowed pairs sorted by `(query_doc, key_doc)`.
    pub pairs: Vec<BlockPair>,
    pub n_tokens: usize,
}

impl BlockPlan {
    /// Allowed pairs of one query document, in key-document order.
    fn pairs_of(&self, query_doc: usize) -> &[BlockPair] {
        let start = self.pairs.partition_point(|p| p.query_doc < query_doc);
        let end = self.pairs.partition_point(|p| p.query_doc <= query_doc);
        &self.pairs[start..end]
    }

    /// Token-pair count over all allowed blocks.
    pub fn attended_pairs(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| {
                let (qs, qe) = self.spans[p.query_doc];
                let (ks, ke) = self.spans[p.key_doc];
                (qe - qs) * (ke - ks)
            })
            .sum()
    }

    /// Combined relation weight of the pair under `betas`.
    fn pair_weight(pair: &BlockPair, betas: &[f64]) -> f64 {
        let mut w = 0.0;
        for (j, beta) in betas.iter().enumerate() {
            if pair.relation_bits & (1 << j) != 0 {
                w += beta;
            }
        }
        w
    }
}

/// Build the block plan from document-level relations and the token map.
pub fn build_block_plan(relations: &[RelationMatrix], doc_of_token: &[usize]) -> BlockPlan {
    assert!(!relations.is_empty());
    let n_docs = relations[0].n;
    for r in relations {
        assert_eq!(r.n, n_docs, "relation matrices disagree on size");
    }
    let mut spans = vec![(usize::MAX, 0usize); n_docs];
    for (pos, &d) in doc_of_token.iter().enumerate() {
        assert!(d < n_docs, "token {pos} maps to unknown document {d}");
        let span = &mut spans[d];
        span.0 = span.0.min(pos);
        span.1 = span.1.max(pos + 1);
    }
    debug_assert!(
        spans.iter().all(|&(s, e)| s < e),
        "every document must contribute at least one token"
    );

    let mut pairs = Vec::new();
    for p in 0..n_docs {
        for q in 0..n_docs {
            let mut bits = 0u8;
            for (j, r) in relations.iter().enumerate() {
                if r.get(p, q) {
                    bits |= 1 << j;
                }
            }
            if bits != 0 {
                pairs.push(BlockPair {
                    query_doc: p,
                    key_doc: q,
                    relation_bits: bits,
                });
            }
        }
    }
    BlockPlan {
        spans,
        pairs,
        n_tokens: doc_of_token.len(),
    }
}

/// Workspace accounting for the block-sparse path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnStats {
    /// Token pairs for which a logit was computed.
    pub attended_pairs: usize,
    /// Largest per-row scratch width (allowed key tokens of one document).
    pub peak_workspace: usize,
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(), AttnError> {
    if q.ncols() != k.ncols() {
        return Err(AttnError::ShapeMismatch(format!(
            "q has width {} but k has width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() != v.nrows() {
        return Err(AttnError::ShapeMismatch(format!(
            "k has {} rows but v has {}",
            k.nrows(),
            v.nrows()
        )));
    }
    Ok(())
}

/// Dense reference head: materializes the token-level masks.
///
/// For allowed pairs the logit is `(QK^T)[s][t] * sum_j beta_j R_j[s][t] /
/// sqrt(d_k)`; disallowed pairs are excluded from the softmax. Every output
/// row is a convex combination of `v` rows over the allowed positions.
pub fn relation_attention_head(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    token_masks: &[TokenMask],
    betas: &[f64],
    d_k: usize,
) -> Result<Matrix, AttnError> {
    let probs = relation_attention_probs(q, k, token_masks, betas, d_k)?;
    check_qkv(q, k, v)?;
    Ok(probs.dot(v))
}

/// Attention probabilities of the dense reference path (for tests and
/// debugging of the allowed/disallowed structure).
pub fn relation_attention_probs(
    q: &Matrix,
    k: &Matrix,
    token_masks: &[TokenMask],
    betas: &[f64],
    d_k: usize,
) -> Result<Matrix, AttnError> {
    if token_masks.len() != betas.len() {
        return Err(AttnError::ShapeMismatch(format!(
            "{} masks but {} beta weights",
            token_masks.len(),
            betas.len()
        )));
    }
    if q.ncols() != k.ncols() {
        return Err(AttnError::ShapeMismatch(format!(
            "q has width {} but k has width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    let (n_q, n_k) = (q.nrows(), k.nrows());
    for mask in token_masks {
        if mask.n_tokens() != n_q {
            return Err(AttnError::ShapeMismatch(format!(
                "mask covers {} tokens but q has {} rows",
                mask.n_tokens(),
                n_q
            )));
        }
    }

    let scale = 1.0 / (d_k as f64).sqrt();
    let scores = q.dot(&k.t());
    let mut logits = Matrix::zeros((n_q, n_k));
    for s in 0..n_q {
        let mut any = false;
        for t in 0..n_k {
            let mut weight = 0.0;
            let mut allowed = false;
            for (mask, beta) in token_masks.iter().zip(betas) {
                if mask.get(s, t) {
                    allowed = true;
                    weight += beta;
                }
            }
            logits[(s, t)] = if allowed {
                any = true;
                scores[(s, t)] * weight * scale
            } else {
                f64::NEG_INFINITY
            };
        }
        if !any {
            return Err(AttnError::EmptyAttentionRow(s));
        }
    }
    Ok(softmax_rows_masked(&logits, None))
}

/// Forward kernel over allowed blocks. The scratch buffers are sized by the
/// widest allowed key range of a single document, never by `n_tokens^2`.
pub(crate) fn block_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    betas: &[f64],
    plan: &BlockPlan,
) -> (Matrix, AttnStats) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let d_v = v.ncols();
    let mut out = Matrix::zeros((q.nrows(), d_v));
    let mut stats = AttnStats {
        attended_pairs: 0,
        peak_workspace: 0,
    };

    let mut logits: Vec<f64> = Vec::new();
    let mut key_rows: Vec<usize> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();

    for (p, &(q_start, q_end)) in plan.spans.iter().enumerate() {
        let pairs = plan.pairs_of(p);
        assert!(
            !pairs.is_empty(),
            "document {p} has no allowed attention targets"
        );

        key_rows.clear();
        weights.clear();
        for pair in pairs {
            let w = BlockPlan::pair_weight(pair, betas);
            let (ks, ke) = plan.spans[pair.key_doc];
            for t in ks..ke {
                key_rows.push(t);
                weights.push(w);
            }
        }
        let width = key_rows.len();
        stats.peak_workspace = stats.peak_workspace.max(width);
        stats.attended_pairs += (q_end - q_start) * width;
        logits.resize(width, 0.0);

        for s in q_start..q_end {
            let q_row = q.row(s);
            let mut max = f64::NEG_INFINITY;
            for (slot, (&t, &w)) in key_rows.iter().zip(&weights).enumerate() {
                let dot: f64 = q_row
                    .iter()
                    .zip(k.row(t).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let z = dot * w * scale;
                logits[slot] = z;
                max = max.max(z);
            }
            let mut sum = 0.0;
            for z in logits.iter_mut() {
                *z = (*z - max).exp();
                sum += *z;
            }
            let mut out_row = out.row_mut(s);
            for (slot, &t) in key_rows.iter().enumerate() {
                let a = logits[slot] / sum;
                let v_row = v.row(t);
                for (o, vv) in out_row.iter_mut().zip(v_row.iter()) {
                    *o += a * vv;
                }
            }
        }
    }
    (out, stats)
}

/// Backward kernel: recomputes per-row probabilities block by block and
/// accumulates gradients for `q`, `k`, `v` and the beta weights.
pub(crate) fn block_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    betas: &[f64],
    plan: &BlockPlan,
    dy: &Matrix,
) -> (Matrix, Matrix, Matrix, Vec<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut dq = Matrix::zeros(q.dim());
    let mut dk = Matrix::zeros(k.dim());
    let mut dv = Matrix::zeros(v.dim());
    let mut dbetas = vec![0.0; betas.len()];

    for (p, &(q_start, q_end)) in plan.spans.iter().enumerate() {
        let pairs = plan.pairs_of(p);
        let mut key_rows: Vec<usize> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        let mut pair_of_slot: Vec<usize> = Vec::new();
        for (pi, pair) in pairs.iter().enumerate() {
            let w = BlockPlan::pair_weight(pair, betas);
            let (ks, ke) = plan.spans[pair.key_doc];
            for t in ks..ke {
                key_rows.push(t);
                weights.push(w);
                pair_of_slot.push(pi);
            }
        }
        let width = key_rows.len();
        let mut dots = vec![0.0; width];
        let mut probs = vec![0.0; width];
        let mut da = vec![0.0; width];
        let mut dpair_w = vec![0.0; pairs.len()];

        for s in q_start..q_end {
            let q_row = q.row(s);
            // Recompute the forward row (same order, same floats).
            let mut max = f64::NEG_INFINITY;
            for slot in 0..width {
                let t = key_rows[slot];
                let dot: f64 = q_row
                    .iter()
                    .zip(k.row(t).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                dots[slot] = dot;
                let z = dot * weights[slot] * scale;
                probs[slot] = z;
                max = max.max(z);
            }
            let mut sum = 0.0;
            for z in probs.iter_mut() {
                *z = (*z - max).exp();
                sum += *z;
            }
            for z in probs.iter_mut() {
                *z /= sum;
            }

            let g = dy.row(s);
            // dz_t = a_t * (da_t - sum_u a_u da_u), with da_t = g . v_t.
            let mut row_dot = 0.0;
            for slot in 0..width {
                let t = key_rows[slot];
                let dv_dot: f64 = g.iter().zip(v.row(t).iter()).map(|(a, b)| a * b).sum();
                da[slot] = dv_dot;
                row_dot += probs[slot] * dv_dot;
            }
            for slot in 0..width {
                let t = key_rows[slot];
                let a = probs[slot];
                let dz = a * (da[slot] - row_dot);

                {
                    let mut dv_row = dv.row_mut(t);
                    for (o, gv) in dv_row.iter_mut().zip(g.iter()) {
                        *o += a * gv;
                    }
                }
                let coeff = dz * weights[slot] * scale;
                {
                    let mut dq_row = dq.row_mut(s);
                    for (o, kv) in dq_row.iter_mut().zip(k.row(t).iter()) {
                        *o += coeff * kv;
                    }
                }
                {
                    let mut dk_row = dk.row_mut(t);
                    for (o, qv) in dk_row.iter_mut().zip(q_row.iter()) {
                        *o += coeff * qv;
                    }
                }
                dpair_w[pair_of_slot[slot]] += dz * dots[slot] * scale;
            }
        }

        for (pair, dw) in pairs.iter().zip(&dpair_w) {
            for (j, db) in dbetas.iter_mut().enumerate() {
                if pair.relation_bits & (1 << j) != 0 {
                    *db += dw;
                }
            }
        }
    }
    (dq, dk, dv, dbetas)
}

fn validate_block_inputs(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    plan: &BlockPlan,
) -> Result<(), AttnError> {
    check_qkv(q, k, v)?;
    if q.nrows() != plan.n_tokens || k.nrows() != plan.n_tokens {
        return Err(AttnError::ShapeMismatch(format!(
            "plan covers {} tokens but q/k have {}/{} rows",
            plan.n_tokens,
            q.nrows(),
            k.nrows()
        )));
    }
    for (p, &(start, _)) in plan.spans.iter().enumerate() {
        if plan.pairs_of(p).is_empty() {
            return Err(AttnError::EmptyAttentionRow(start));
        }
    }
    Ok(())
}

/// Block-multiplied sparse attention over allowed document pairs.
///
/// Numerically equivalent to [`relation_attention_head`] with fully
/// materialized masks; blocks whose combined relation entry is zero in
/// every matrix are skipped entirely.
pub fn block_sparse_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    doc_of_token: &[usize],
    relations: &[RelationMatrix],
    betas: &[f64],
) -> Result<Matrix, AttnError> {
    block_sparse_attention_with_stats(q, k, v, doc_of_token, relations, betas).map(|(out, _)| out)
}

/// Same as [`block_sparse_attention`] but also reports workspace usage.
pub fn block_sparse_attention_with_stats(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    doc_of_token: &[usize],
    relations: &[RelationMatrix],
    betas: &[f64],
) -> Result<(Matrix, AttnStats), AttnError> {
    if relations.len() != betas.len() {
        return Err(AttnError::ShapeMismatch(format!(
            "{} relation matrices but {} beta weights",
            relations.len(),
            betas.len()
        )));
    }
    let plan = build_block_plan(relations, doc_of_token);
    validate_block_inputs(q, k, v, &plan)?;
    Ok(block_forward(q, k, v, betas, &plan))
}

/// Fused tape op for the block-sparse head: inputs `[q, k, v, beta]` with
/// `beta` a `1 x n_relations` row.
pub struct BlockSparseAttnOp {
    pub plan: Arc<BlockPlan>,
}

impl CustomOp for BlockSparseAttnOp {
    fn forward(&self, inputs: &[&Matrix]) -> Matrix {
        let [q, k, v, beta] = inputs else {
            panic!("block-sparse op expects q, k, v, beta");
        };
        let betas: Vec<f64> = beta.row(0).to_vec();
        block_forward(q, k, v, &betas, &self.plan).0
    }

    fn backward(&self, inputs: &[&Matrix], output_grad: &Matrix) -> Vec<Matrix> {
        let [q, k, v, beta] = inputs else {
            panic!("block-sparse op expects q, k, v, beta");
        };
        let betas: Vec<f64> = beta.row(0).to_vec();
        let (dq, dk, dv, dbetas) = block_backward(q, k, v, &betas, &self.plan, output_grad);
        let dbeta =
            Matrix::from_shape_vec((1, dbetas.len()), dbetas).expect("beta gradient shape");
        vec![dq, dk, dv, dbeta]
    }

    fn name(&self) -> &'static str {
        "block_sparse_attention"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::extend_relations;
    use crate::autograd::Tape;
    use crate::conversation::{Acceptance, DocType, Document, Sample};
    use crate::relations::{build_all_relations, build_relation, RelationKind};
    use crate::synth::fixture_forest;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn self_mask(n_docs: usize, doc_of_token: &[usize]) -> Vec<TokenMask> {
        let mut rel = RelationMatrix::zeros(RelationKind::DocumentSelf, n_docs);
        for i in 0..n_docs {
            rel.set(i, i, true);
        }
        extend_relations(std::slice::from_ref(&rel), doc_of_token)
    }

    /// Plain scaled dot-product attention for the single-document reduction.
    fn standard_attention(q: &Matrix, k: &Matrix, v: &Matrix, d_k: usize) -> Matrix {
        let scale = 1.0 / (d_k as f64).sqrt();
        let logits = q.dot(&k.t()) * scale;
        softmax_rows_masked(&logits, None).dot(v)
    }

    fn single_doc_sample() -> Sample {
        Sample {
            paper_id: "p".into(),
            venue: "v".into(),
            acceptance: Acceptance::Accept,
            meta_review: "m".into(),
            documents: vec![Document {
                doc_id: "a".into(),
                parent_id: None,
                doc_type: DocType::PaperAbstract,
                text: "t".into(),
                rating: None,
                confidence: None,
            }],
        }
    }

    #[test]
    fn single_document_reduces_to_standard_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 6;
        let d = 4;
        let q = random_matrix(&mut rng, n, d);
        let k = random_matrix(&mut rng, n, d);
        let v = random_matrix(&mut rng, n, d);
        let doc_of_token = vec![0usize; n];
        let masks = self_mask(1, &doc_of_token);
        let out = relation_attention_head(&q, &k, &v, &masks, &[1.0], d).unwrap();
        let expected = standard_attention(&q, &k, &v, d);
        let diff = (&out - &expected).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff < 1e-12, "diff {diff}");

        // Block path agrees on the degenerate forest as well.
        let mut own = RelationMatrix::zeros(RelationKind::DocumentSelf, 1);
        own.set(0, 0, true);
        let block =
            block_sparse_attention(&q, &k, &v, &doc_of_token, std::slice::from_ref(&own), &[1.0])
                .unwrap();
        let diff = (&block - &expected).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff < 1e-12, "block diff {diff}");
    }

    #[test]
    fn all_zero_relations_are_an_empty_row() {
        let q = array![[1.0], [1.0]];
        let v = array![[1.0], [3.0]];
        let zero = RelationMatrix::zeros(RelationKind::Siblings, 2);
        let result = block_sparse_attention(
            &q,
            &q,
            &v,
            &[0usize, 1],
            std::slice::from_ref(&zero),
            &[1.0],
        );
        assert!(matches!(result, Err(AttnError::EmptyAttentionRow(_))));
    }

    #[test]
    fn identity_mask_returns_values() {
        // Two documents with one token each; each token sees only itself.
        let q = array![[1.0], [1.0]];
        let k = q.clone();
        let v = array![[1.0], [3.0]];
        let doc_of_token = vec![0usize, 1];
        let masks = self_mask(2, &doc_of_token);
        let out = relation_attention_head(&q, &k, &v, &masks, &[1.0], 1).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn self_plus_siblings_hand_case() {
        let q = array![[1.0], [1.0]];
        let k = q.clone();
        let v = array![[1.0], [3.0]];
        let doc_of_token = vec![0usize, 1];

        let mut own = RelationMatrix::zeros(RelationKind::DocumentSelf, 2);
        own.set(0, 0, true);
        own.set(1, 1, true);
        let mut sib = RelationMatrix::zeros(RelationKind::Siblings, 2);
        sib.set(0, 1, true);
        sib.set(1, 0, true);
        let relations = vec![sib, own];
        let masks = extend_relations(&relations, &doc_of_token);

        // All logits are 1/sqrt(1); softmax is uniform, so both rows pool v.
        let out = relation_attention_head(&q, &k, &v, &masks, &[1.0, 1.0], 1).unwrap();
        assert!((out[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((out[(1, 0)] - 2.0).abs() < 1e-12);

        let (block, _) =
            block_sparse_attention_with_stats(&q, &k, &v, &doc_of_token, &relations, &[1.0, 1.0])
                .unwrap();
        assert!((block[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        let k = array![[1.0], [0.0]];
        let v = array![[1.0], [3.0]];
        let doc_of_token = vec![0usize, 1];
        let masks = self_mask(2, &doc_of_token);
        assert!(matches!(
            relation_attention_head(&q, &k, &v, &masks, &[1.0], 1),
            Err(AttnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn fixture_self_only_attends_within_documents() {
        let s = fixture_forest();
        let vocab = crate::assembly::Vocab::build(std::slice::from_ref(&s), 256).unwrap();
        let assembled = crate::assembly::assemble_input(&s, &vocab, 30).unwrap();
        let n = assembled.len();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_matrix(&mut rng, n, 4);
        let k = random_matrix(&mut rng, n, 4);
        let v = random_matrix(&mut rng, n, 4);

        let own = build_relation(&s, RelationKind::DocumentSelf);
        let (_, stats) = block_sparse_attention_with_stats(
            &q,
            &k,
            &v,
            &assembled.doc_of_token,
            std::slice::from_ref(&own),
            &[0.7],
        )
        .unwrap();
        // Pair-count oracle: only the five diagonal blocks are computed.
        let expected: usize = assembled
            .doc_spans()
            .iter()
            .map(|(s, e)| (e - s) * (e - s))
            .sum();
        assert_eq!(stats.attended_pairs, expected);
        assert!(stats.attended_pairs < n * n);
    }

    #[test]
    fn plan_blocks_equal_relation_union() {
        // Path-shaped forest: doc i is the child of doc i-1.
        let documents: Vec<Document> = (0..4)
            .map(|i| Document {
                doc_id: format!("d{i}"),
                parent_id: (i > 0).then(|| format!("d{}", i - 1)),
                doc_type: if i == 0 {
                    DocType::PublicReview
                } else {
                    DocType::PublicResponse
                },
                text: "w w w".into(),
                rating: None,
                confidence: None,
            })
            .collect();
        let sample = Sample {
            paper_id: "p".into(),
            venue: "v".into(),
            acceptance: Acceptance::Accept,
            meta_review: "m".into(),
            documents,
        };
        let relations = build_all_relations(&sample);
        let doc_of_token: Vec<usize> = (0..4).flat_map(|d| vec![d, d]).collect();
        let plan = build_block_plan(&relations, &doc_of_token);
        for p in 0..4 {
            for q in 0..4 {
                let in_plan = plan
                    .pairs
                    .iter()
                    .any(|pair| pair.query_doc == p && pair.key_doc == q);
                let in_union = relations.iter().any(|r| r.get(p, q));
                assert_eq!(in_plan, in_union, "({p},{q})");
            }
        }
    }

    #[test]
    fn block_path_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let sample = crate::synth::random_forest(&mut rng, 6);
            let vocab = crate::assembly::Vocab::build(std::slice::from_ref(&sample), 512).unwrap();
            let budget = rng.random_range(2 * sample.n_docs()..=48.max(2 * sample.n_docs()));
            let assembled = crate::assembly::assemble_input(&sample, &vocab, budget).unwrap();
            let n = assembled.len();
            let d_k = 4;
            let q = random_matrix(&mut rng, n, d_k);
            let k = random_matrix(&mut rng, n, d_k);
            let v = random_matrix(&mut rng, n, d_k);
            let relations = build_all_relations(&sample);
            let betas: Vec<f64> = (0..7).map(|_| rng.random_range(-0.4..0.4)).collect();

            let masks = extend_relations(&relations, &assembled.doc_of_token);
            let dense = relation_attention_head(&q, &k, &v, &masks, &betas, d_k).unwrap();
            let block =
                block_sparse_attention(&q, &k, &v, &assembled.doc_of_token, &relations, &betas)
                    .unwrap();
            let diff = (&dense - &block).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(diff <= 1e-6, "max abs diff {diff}");
        }
    }

    #[test]
    fn dense_rows_sum_to_one_over_allowed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sample = fixture_forest();
        let vocab = crate::assembly::Vocab::build(std::slice::from_ref(&sample), 256).unwrap();
        let assembled = crate::assembly::assemble_input(&sample, &vocab, 25).unwrap();
        let n = assembled.len();
        let q = random_matrix(&mut rng, n, 3);
        let k = random_matrix(&mut rng, n, 3);
        let relations = build_all_relations(&sample);
        let masks = extend_relations(&relations, &assembled.doc_of_token);
        let betas = vec![0.2; 7];
        let probs = relation_attention_probs(&q, &k, &masks, &betas, 3).unwrap();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn beta_scaling_preserves_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let sample = crate::synth::random_forest(&mut rng, 5);
            let vocab = crate::assembly::Vocab::build(std::slice::from_ref(&sample), 256).unwrap();
            let assembled =
                crate::assembly::assemble_input(&sample, &vocab, 32.max(2 * sample.n_docs()))
                    .unwrap();
            let n = assembled.len();
            let q = random_matrix(&mut rng, n, 3);
            let k = random_matrix(&mut rng, n, 3);
            let relations = build_all_relations(&sample);
            let masks = extend_relations(&relations, &assembled.doc_of_token);
            let betas: Vec<f64> = (0..7).map(|_| rng.random_range(0.05..0.5)).collect();
            let c = rng.random_range(0.1..10.0);
            let scaled: Vec<f64> = betas.iter().map(|b| b * c).collect();

            let p1 = relation_attention_probs(&q, &k, &masks, &betas, 3).unwrap();
            let p2 = relation_attention_probs(&q, &k, &masks, &scaled, 3).unwrap();
            for s in 0..n {
                for t in 0..n {
                    assert_eq!(p1[(s, t)] > 0.0, p2[(s, t)] > 0.0, "support changed");
                }
            }
        }
    }

    #[test]
    fn fused_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sample = fixture_forest();
        let vocab = crate::assembly::Vocab::build(std::slice::from_ref(&sample), 256).unwrap();
        let assembled = crate::assembly::assemble_input(&sample, &vocab, 20).unwrap();
        let n = assembled.len();
        let d = 3;
        let relations = build_all_relations(&sample);
        let plan = Arc::new(build_block_plan(&relations, &assembled.doc_of_token));

        let q0 = random_matrix(&mut rng, n, d);
        let k0 = random_matrix(&mut rng, n, d);
        let v0 = random_matrix(&mut rng, n, d);
        let b0 = Matrix::from_shape_fn((1, 7), |_| rng.random_range(0.1..0.3));
        let inputs = vec![q0, k0, v0, b0];

        let build = |inputs: &[Matrix]| -> (Tape, crate::autograd::Var, Vec<crate::autograd::Var>) {
            let mut tape = Tape::new();
            let vars: Vec<_> = inputs.iter().map(|m| tape.param(m.clone())).collect();
            let out = tape.custom(
                &vars,
                Arc::new(BlockSparseAttnOp {
                    plan: Arc::clone(&plan),
                }),
            );
            let sq = tape.mul_elem(out, out);
            let loss = tape.sum_all(sq);
            (tape, loss, vars)
        };

        let (tape, loss, vars) = build(&inputs);
        let grads = tape.backward(loss).unwrap();

        let h = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i], input.dim());
            for r in 0..input.nrows() {
                for c in 0..input.ncols() {
                    let mut probe = |delta: f64| {
                        let mut shifted = inputs.clone();
                        shifted[i][(r, c)] += delta;
                        let (t, l, _) = build(&shifted);
                        t.scalar(l)
                    };
                    let fd = (probe(h) - probe(-h)) / (2.0 * h);
                    let a = analytic[(r, c)];
                    let err = (a - fd).abs() / (a.abs() + fd.abs()).max(1.0);
                    assert!(err < 1e-6, "input {i} ({r},{c}): {a} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn beta_gradient_zero_for_unused_relations() {
        // Single document: only document-self and same-thread are non-empty,
        // so the other five beta components get exact zeros.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 4;
        let d = 3;
        let relations = build_all_relations(&single_doc_sample());
        let doc_of_token = vec![0usize; n];
        let plan = Arc::new(build_block_plan(&relations, &doc_of_token));

        let mut tape = Tape::new();
        let q = tape.param(random_matrix(&mut rng, n, d));
        let k = tape.param(random_matrix(&mut rng, n, d));
        let v = tape.param(random_matrix(&mut rng, n, d));
        let beta = tape.param(Matrix::from_shape_fn((1, 7), |_| rng.random_range(0.1..0.3)));
        let out = tape.custom(&[q, k, v, beta], Arc::new(BlockSparseAttnOp { plan }));
        let sq = tape.mul_elem(out, out);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let dbeta = grads.get(beta).unwrap();

        use crate::relations::RelationKind::*;
        for kind in crate::relations::RelationKind::ALL {
            let expected_zero = !matches!(kind, DocumentSelf | SameThread);
            let g = dbeta[(0, kind.index())];
            if expected_zero {
                assert_eq!(g, 0.0, "{kind} should have zero gradient");
            }
        }
        assert!(dbeta[(0, DocumentSelf.index())].abs() > 0.0);
    }

    #[test]
    fn workspace_scales_with_allowed_blocks() {
        // Two long unrelated threads: cross-thread blocks are disallowed
        // under self + same-thread masks, so most blocks are skipped.
        let mut docs = Vec::new();
        for t in 0..2 {
            for i in 0..4 {
                docs.push(Document {
                    doc_id: format!("t{t}d{i}"),
                    parent_id: (i > 0).then(|| format!("t{t}d{}", i - 1)),
                    doc_type: if i == 0 {
                        DocType::PublicReview
                    } else {
                        DocType::PublicResponse
                    },
                    text: "w1 w2 w3 w4 w5 w6 w7".into(),
                    rating: None,
                    confidence: None,
                });
            }
        }
        let sample = Sample {
            paper_id: "p".into(),
            venue: "v".into(),
            acceptance: Acceptance::Accept,
            meta_review: "m".into(),
            documents: docs,
        };
        let vocab = crate::assembly::Vocab::build(std::slice::from_ref(&sample), 256).unwrap();
        let assembled = crate::assembly::assemble_input(&sample, &vocab, 64).unwrap();
        let n = assembled.len();

        let relations = vec![
            build_relation(&sample, RelationKind::DocumentSelf),
            build_relation(&sample, RelationKind::SameThread),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_matrix(&mut rng, n, 3);
        let k = random_matrix(&mut rng, n, 3);
        let v = random_matrix(&mut rng, n, 3);
        let (_, stats) = block_sparse_attention_with_stats(
            &q,
            &k,
            &v,
            &assembled.doc_of_token,
            &relations,
            &[0.3, 0.3],
        )
        .unwrap();

        let plan = build_block_plan(&relations, &assembled.doc_of_token);
        assert_eq!(stats.attended_pairs, plan.attended_pairs());
        // Cross-thread blocks are gone: about half of the dense pair count.
        assert!(stats.attended_pairs <= n * n / 2 + n);
        // Scratch width is one thread's tokens, far below n^2.
        assert!(stats.peak_workspace < n);
    }
}
