//! Dataset-side procedures: conflict labeling, corpus statistics,
//! novel-n-gram abstractiveness and deterministic splits.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::assembly::tokenize;
use crate::conversation::Sample;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("split ratios must sum to 1, got {0}")]
    BadRatios(f64),
}

/// Conflict label of one sample: conflicting when at least one pair of
/// official reviews has a rating difference of 4 or more.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConflictLabel {
    pub is_cf: bool,
    pub max_pair_diff: u8,
    pub n_official_reviews: usize,
}

/// Label a sample by its largest official-review rating difference.
///
/// Samples with fewer than two official reviews get `max_pair_diff = 0`
/// and are labeled non-conflicting; `n_official_reviews` is recorded so
/// callers can apply a different convention.
pub fn detect_conflict(sample: &Sample) -> ConflictLabel {
    let ratings: Vec<u8> = sample
        .documents
        .iter()
        .filter_map(|d| d.rating)
        .collect();
    let max_pair_diff = match (ratings.iter().max(), ratings.iter().min()) {
        (Some(max), Some(min)) if ratings.len() >= 2 => max - min,
        _ => 0,
    };
    ConflictLabel {
        is_cf: ratings.len() >= 2 && max_pair_diff >= 4,
        max_pair_diff,
        n_official_reviews: ratings.len(),
    }
}

/// Aggregate corpus statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub n_samples: usize,
    pub mean_docs_per_sample: f64,
    pub mean_sentences_per_doc: f64,
    pub mean_tokens_per_doc: f64,
    pub mean_sentences_per_summary: f64,
    pub mean_tokens_per_summary: f64,
    pub mean_tree_height: f64,
    pub mean_tree_width: f64,
    /// Mean over samples (with at least one official review) of the
    /// population variance of that sample's review ratings.
    pub mean_rating_variance: f64,
    pub cf_fraction: f64,
}

/// Split text into sentences on `.`, `!`, `?` followed by whitespace or
/// end of text. Abbreviations are not special-cased.
pub fn sentence_split(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(ch) = chars.next() {
        current.push(ch);
        if matches!(ch, '.' | '!' | '?') {
            let at_boundary = match chars.peek() {
                None => true,
                Some(next) => next.is_whitespace(),
            };
            if at_boundary {
                let trimmed = current.trim();
                if !trimmed.is_empty() {
                    sentences.push(trimmed.to_string());
                }
                current.clear();
            }
        }
    }
    let trimmed = current.trim();
    if !trimmed.is_empty() {
        sentences.push(trimmed.to_string());
    }
    sentences
}

fn population_variance(values: &[u8]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Compute [`CorpusStats`] over a non-empty corpus. Token counts use the
/// assembly tokenizer and sentence counts use [`sentence_split`].
pub fn corpus_stats(corpus: &[Sample]) -> Result<CorpusStats, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let n_samples = corpus.len() as f64;
    let mut total_docs = 0usize;
    let mut doc_sentences = 0usize;
    let mut doc_tokens = 0usize;
    let mut summary_sentences = 0usize;
    let mut summary_tokens = 0usize;
    let mut height_sum = 0usize;
    let mut width_sum = 0usize;
    let mut variance_sum = 0.0;
    let mut variance_count = 0usize;
    let mut cf_count = 0usize;

    for sample in corpus {
        total_docs += sample.n_docs();
        for doc in &sample.documents {
            doc_sentences += sentence_split(&doc.text).len();
            doc_tokens += tokenize(&doc.text).len();
        }
        summary_sentences += sentence_split(&sample.meta_review).len();
        summary_tokens += tokenize(&sample.meta_review).len();
        let stats = crate::conversation::tree_stats(sample);
        height_sum += stats.height;
        width_sum += stats.width;

        let ratings: Vec<u8> = sample.documents.iter().filter_map(|d| d.rating).collect();
        if !ratings.is_empty() {
            variance_sum += population_variance(&ratings);
            variance_count += 1;
        }
        if detect_conflict(sample).is_cf {
            cf_count += 1;
        }
    }

    Ok(CorpusStats {
        n_samples: corpus.len(),
        mean_docs_per_sample: total_docs as f64 / n_samples,
        mean_sentences_per_doc: doc_sentences as f64 / total_docs.max(1) as f64,
        mean_tokens_per_doc: doc_tokens as f64 / total_docs.max(1) as f64,
        mean_sentences_per_summary: summary_sentences as f64 / n_samples,
        mean_tokens_per_summary: summary_tokens as f64 / n_samples,
        mean_tree_height: height_sum as f64 / n_samples,
        mean_tree_width: width_sum as f64 / n_samples,
        mean_rating_variance: if variance_count > 0 {
            variance_sum / variance_count as f64
        } else {
            0.0
        },
        cf_fraction: cf_count as f64 / n_samples,
    })
}

/// Pluggable token normalizer applied after lowercasing and stop-word
/// removal. The default is the identity.
pub trait Normalizer {
    fn normalize(&self, token: &str) -> String;
}

/// Identity normalizer (tokens are already lowercased).
pub struct IdentityNormalizer;

impl Normalizer for IdentityNormalizer {
    fn normalize(&self, token: &str) -> String {
        token.to_string()
    }
}

/// Standard 179-word English stop-word list, embedded and versioned with
/// the crate.
pub const STOP_WORDS: [&str; 179] = [
    "i", "me", "my", "myself", "we", "our", "ours", "ourselves", "you", "you're", "you've",
    "you'll", "you'd", "your", "yours", "yourself", "yourselves", "he", "him", "his", "himself",
    "she", "she's", "her", "hers", "herself", "it", "it's", "its", "itself", "they", "them",
    "their", "theirs", "themselves", "what", "which", "who", "whom", "this", "that", "that'll",
    "these", "those", "am", "is", "are", "was", "were", "be", "been", "being", "have", "has",
    "had", "having", "do", "does", "did", "doing", "a", "an", "the", "and", "but", "if", "or",
    "because", "as", "until", "while", "of", "at", "by", "for", "with", "about", "against",
    "between", "into", "through", "during", "before", "after", "above", "below", "to", "from",
    "up", "down", "in", "out", "on", "off", "over", "under", "again", "further", "then", "once",
    "here", "there", "when", "where", "why", "how", "all", "any", "both", "each", "few", "more",
    "most", "other", "some", "such", "no", "nor", "not", "only", "own", "same", "so", "than",
    "too", "very", "s", "t", "can", "will", "just", "don", "don't", "should", "should've", "now",
    "d", "ll", "m", "o", "re", "ve", "y", "ain", "aren", "aren't", "couldn", "couldn't", "didn",
    "didn't", "doesn", "doesn't", "hadn", "hadn't", "hasn", "hasn't", "haven", "haven't", "isn",
    "isn't", "ma", "mightn", "mightn't", "mustn", "mustn't", "needn", "needn't", "shan",
    "shan't", "shouldn", "shouldn't", "wasn", "wasn't", "weren", "weren't", "won", "won't",
    "wouldn", "wouldn't",
];

fn content_tokens(text: &str, normalizer: &dyn Normalizer) -> Vec<String> {
    let stop: HashSet<&str> = STOP_WORDS.iter().copied().collect();
    tokenize(text)
        .into_iter()
        .filter(|t| t.chars().any(|c| c.is_alphanumeric()))
        .filter(|t| !stop.contains(t.as_str()))
        .map(|t| normalizer.normalize(&t))
        .collect()
}

fn ngram_set(tokens: &[String], n: usize) -> HashSet<Vec<String>> {
    if tokens.len() < n {
        return HashSet::new();
    }
    tokens.windows(n).map(|w| w.to_vec()).collect()
}

/// Percentage of summary n-grams (as a set of types) that do not appear in
/// the union of the source documents' n-gram sets, after lowercasing,
/// stop-word removal and normalization.
///
/// Returns `None` when the summary has no n-grams left after preprocessing;
/// such samples are excluded from corpus averages.
pub fn novel_ngram_pct(
    summary: &str,
    source_docs: &[&str],
    n: usize,
    normalizer: &dyn Normalizer,
) -> Option<f64> {
    assert!((1..=3).contains(&n), "n must be 1, 2 or 3");
    let summary_tokens = content_tokens(summary, normalizer);
    let summary_ngrams = ngram_set(&summary_tokens, n);
    if summary_ngrams.is_empty() {
        return None;
    }
    let mut source_ngrams: HashSet<Vec<String>> = HashSet::new();
    for doc in source_docs {
        let tokens = content_tokens(doc, normalizer);
        source_ngrams.extend(ngram_set(&tokens, n));
    }
    let novel = summary_ngrams
        .iter()
        .filter(|g| !source_ngrams.contains(*g))
        .count();
    Some(100.0 * novel as f64 / summary_ngrams.len() as f64)
}

/// Mean novel-n-gram percentages (unigram, bigram, trigram) over a corpus,
/// skipping samples whose summary is empty after preprocessing.
pub fn corpus_abstractiveness(corpus: &[Sample], normalizer: &dyn Normalizer) -> [Option<f64>; 3] {
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for sample in corpus {
        let sources: Vec<&str> = sample.documents.iter().map(|d| d.text.as_str()).collect();
        for (i, n) in (1..=3).enumerate() {
            if let Some(pct) = novel_ngram_pct(&sample.meta_review, &sources, n, normalizer) {
                sums[i] += pct;
                counts[i] += 1;
            }
        }
    }
    [0, 1, 2].map(|i| (counts[i] > 0).then(|| sums[i] / counts[i] as f64))
}

/// Deterministic shuffled split. Validation and test sizes are floored;
/// the remainder goes to train.
pub fn split_dataset(
    corpus: &[Sample],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>), CorpusError> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(sum));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = corpus.len();
    let n_val = (ratios.1 * n as f64).floor() as usize;
    let n_test = (ratios.2 * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;

    let pick = |slice: &[usize]| -> Vec<Sample> {
        slice.iter().map(|&i| corpus[i].clone()).collect()
    };
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}
