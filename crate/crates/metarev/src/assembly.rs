//! Input sequence assembly.
//!
//! A sample's documents are concatenated into one token sequence. Every
//! document starts with a `<doc-sep>` delimiter; the delimiter belongs to
//! the document it opens, so its contextual embedding can summarize that
//! document for the auxiliary heads. The total token budget is divided
//! evenly across documents and each document is truncated to its share
//! (the delimiter counts against the share).
//!
//! Tokenization is deliberately simple and deterministic: lowercase,
//! alphanumeric runs kept whole, punctuation split into single-character
//! tokens, out-of-vocabulary words mapped to `<unk>`.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use thiserror::Error;

use crate::conversation::{DocType, Sample};
use crate::relations::{RelationKind, RelationMatrix};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const DOC_SEP: usize = 4;
pub const RESERVED: usize = 5;

pub const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>", "<doc-sep>"];

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocab size {0} does not exceed the {RESERVED} reserved slots")]
    VocabTooSmall(usize),
    #[error("budget {budget} too small for {n_docs} documents (need at least 2 per document)")]
    BudgetTooSmall { budget: usize, n_docs: usize },
    #[error("sample has no documents")]
    EmptySample,
    #[error("vocab file malformed at line {0}")]
    MalformedVocabFile(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Lowercase tokenizer: alphanumeric runs plus single punctuation characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Token table with five reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            id_to_token,
            token_to_id,
        }
    }

    /// Build from corpus token frequencies (documents and meta-reviews).
    /// Ties are broken lexicographically; at most `max_size` entries total.
    pub fn build(corpus: &[Sample], max_size: usize) -> Result<Vocab, AssemblyError> {
        if corpus.is_empty() {
            return Err(AssemblyError::EmptyCorpus);
        }
        if max_size <= RESERVED {
            return Err(AssemblyError::VocabTooSmall(max_size));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for sample in corpus {
            for doc in &sample.documents {
                for token in tokenize(&doc.text) {
                    *counts.entry(token).or_insert(0) += 1;
                }
            }
            for token in tokenize(&sample.meta_review) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED);
        Ok(Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t).collect()))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Render ids back to text, skipping reserved tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= RESERVED)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Full token list in id order (used by checkpoints).
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Rebuild from an id-ordered token list (checkpoint payload).
    pub fn from_id_ordered(tokens: Vec<String>) -> Result<Vocab, AssemblyError> {
        if tokens.len() < RESERVED
            || tokens[..RESERVED] != RESERVED_TOKENS.map(String::from)[..]
        {
            return Err(AssemblyError::MalformedVocabFile(0));
        }
        Ok(Vocab::from_tokens(tokens[RESERVED..].to_vec()))
    }

    /// Save as an id-sorted `id<TAB>token` text file.
    pub fn save(&self, path: &Path) -> Result<(), AssemblyError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (id, token) in self.id_to_token.iter().enumerate() {
            writeln!(file, "{id}\t{token}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, AssemblyError> {
        let file = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (id, token) = line
                .split_once('\t')
                .ok_or(AssemblyError::MalformedVocabFile(lineno + 1))?;
            let id: usize = id
                .parse()
                .map_err(|_| AssemblyError::MalformedVocabFile(lineno + 1))?;
            if id != tokens.len() {
                return Err(AssemblyError::MalformedVocabFile(lineno + 1));
            }
            tokens.push(token.to_string());
        }
        Vocab::from_id_ordered(tokens)
    }
}

/// A sample rendered as one delimiter-separated token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledInput {
    pub token_ids: Vec<usize>,
    /// Owning document index of every token; delimiters belong to the
    /// document they open, so this is non-decreasing.
    pub doc_of_token: Vec<usize>,
    /// Positions of the `<doc-sep>` tokens, one per document, in order.
    pub delimiter_indices: Vec<usize>,
    /// The subset of `delimiter_indices` that belongs to official reviews.
    pub official_review_positions: Vec<usize>,
    pub budget: usize,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Contiguous token span `[start, end)` of each document.
    pub fn doc_spans(&self) -> Vec<(usize, usize)> {
        let n_docs = self.delimiter_indices.len();
        let mut spans = Vec::with_capacity(n_docs);
        for d in 0..n_docs {
            let start = self.delimiter_indices[d];
            let end = if d + 1 < n_docs {
                self.delimiter_indices[d + 1]
            } else {
                self.token_ids.len()
            };
            spans.push((start, end));
        }
        spans
    }
}

/// Concatenate a sample's documents under an even per-document budget.
///
/// The per-document cap is `budget / n_docs` (integer division); each
/// document contributes `<doc-sep>` followed by its first `cap - 1` tokens,
/// or fewer when the document is shorter.
pub fn assemble_input(
    sample: &Sample,
    vocab: &Vocab,
    budget: usize,
) -> Result<AssembledInput, AssemblyError> {
    let n_docs = sample.n_docs();
    if n_docs == 0 {
        return Err(AssemblyError::EmptySample);
    }
    let cap = budget / n_docs;
    if cap < 2 {
        return Err(AssemblyError::BudgetTooSmall { budget, n_docs });
    }

    let mut token_ids = Vec::new();
    let mut doc_of_token = Vec::new();
    let mut delimiter_indices = Vec::with_capacity(n_docs);
    let mut official_review_positions = Vec::new();

    for (d, doc) in sample.documents.iter().enumerate() {
        let position = token_ids.len();
        delimiter_indices.push(position);
        if doc.doc_type == DocType::OfficialReview {
            official_review_positions.push(position);
        }
        token_ids.push(DOC_SEP);
        doc_of_token.push(d);
        for id in vocab.encode_text(&doc.text).into_iter().take(cap - 1) {
            token_ids.push(id);
            doc_of_token.push(d);
        }
    }
    debug_assert!(token_ids.len() <= budget);

    Ok(AssembledInput {
        token_ids,
        doc_of_token,
        delimiter_indices,
        official_review_positions,
        budget,
    })
}

/// Token-level view of a document-level relation matrix.
///
/// The matrix is kept implicit: entry `(s, t)` is the document-level entry
/// for the owning documents of tokens `s` and `t`. Dense materialization is
/// only for the reference attention path and debugging.
#[derive(Debug, Clone)]
pub struct TokenMask {
    pub kind: RelationKind,
    relation: RelationMatrix,
    doc_of_token: Arc<Vec<usize>>,
}

impl TokenMask {
    pub fn n_tokens(&self) -> usize {
        self.doc_of_token.len()
    }

    #[inline]
    pub fn get(&self, s: usize, t: usize) -> bool {
        self.relation
            .get(self.doc_of_token[s], self.doc_of_token[t])
    }

    pub fn relation(&self) -> &RelationMatrix {
        &self.relation
    }

    pub fn to_dense(&self) -> Array2<bool> {
        let n = self.n_tokens();
        Array2::from_shape_fn((n, n), |(s, t)| self.get(s, t))
    }
}

/// Extend document-level relation matrices to token level.
pub fn extend_relations(
    matrices: &[RelationMatrix],
    doc_of_token: &[usize],
) -> Vec<TokenMask> {
    let shared = Arc::new(doc_of_token.to_vec());
    for m in matrices {
        assert!(
            doc_of_token.iter().all(|&d| d < m.n),
            "token maps to document index out of range"
        );
    }
    matrices
        .iter()
        .map(|m| TokenMask {
            kind: m.kind,
            relation: m.clone(),
            doc_of_token: Arc::clone(&shared),
        })
        .collect()
}

/// `<bos> ... <eos>` target sequence, truncated to `max_out` with the
/// terminal `<eos>` forced.
pub fn build_decoder_target(meta_review: &str, vocab: &Vocab, max_out: usize) -> Vec<usize> {
    assert!(max_out >= 2, "decoder target needs room for <bos> and <eos>");
    let mut ids = Vec::with_capacity(max_out);
    ids.push(BOS);
    ids.extend(vocab.encode_text(meta_review));
    ids.push(EOS);
    if ids.len() > max_out {
        ids.truncate(max_out - 1);
        ids.push(EOS);
    }
    ids
}
