//! Deterministic synthetic corpora.
//!
//! Everything here is seeded and reproducible: the shared five-document
//! test fixture, random conversation forests for property tests, tiny
//! memorization corpora for the overfit probe, a fuller synthetic corpus
//! for smoke runs, and an OpenReview-style notes dump built from it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::conversation::{Acceptance, DocType, Document, Sample};

/// Canonical five-document forest used across test suites:
/// doc0 abstract (root), doc1 official review (root), doc2 author response
/// under doc1, doc3 official response under doc2, doc4 official review (root).
pub fn fixture_forest() -> Sample {
    let doc = |id: &str, parent: Option<&str>, doc_type: DocType, text: &str| Document {
        doc_id: id.into(),
        parent_id: parent.map(str::to_string),
        doc_type,
        text: text.into(),
        rating: (doc_type == DocType::OfficialReview).then_some(7),
        confidence: (doc_type == DocType::OfficialReview).then_some(4),
    };
    Sample {
        paper_id: "fixture".into(),
        venue: "venue".into(),
        acceptance: Acceptance::Accept,
        meta_review: "reviewers liked the idea and the paper is accepted".into(),
        documents: vec![
            doc(
                "doc0",
                None,
                DocType::PaperAbstract,
                "we study sparse attention over conversation trees",
            ),
            doc(
                "doc1",
                None,
                DocType::OfficialReview,
                "the idea is novel but evaluation is thin",
            ),
            doc(
                "doc2",
                Some("doc1"),
                DocType::AuthorResponse,
                "we added experiments as requested",
            ),
            doc(
                "doc3",
                Some("doc2"),
                DocType::OfficialResponse,
                "thanks the new results address my concern",
            ),
            doc(
                "doc4",
                None,
                DocType::OfficialReview,
                "clear writing and strong results overall",
            ),
        ],
    }
}

const WORDS: [&str; 40] = [
    "sparse", "attention", "graph", "kernel", "memory", "routing", "pruning", "masking",
    "encoder", "decoder", "novel", "clear", "limited", "strong", "weak", "sound", "thorough",
    "incremental", "baseline", "ablation", "results", "proof", "dataset", "metric", "training",
    "variance", "signal", "margin", "layer", "token", "budget", "review", "response", "thread",
    "model", "methods", "analysis", "evidence", "scores", "claims",
];

fn words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Random valid conversation forest with up to `max_docs` documents.
///
/// Structure, types and metadata all satisfy the sample invariants, so the
/// output can drive property tests anywhere a parsed sample is accepted.
pub fn random_forest(rng: &mut ChaCha8Rng, max_docs: usize) -> Sample {
    let n_docs = rng.random_range(1..=max_docs.max(1));
    let mut documents: Vec<Document> = Vec::with_capacity(n_docs);
    let mut has_abstract = false;

    for i in 0..n_docs {
        // Bias towards attaching below an existing document; index 0 means root.
        let parent = if documents.is_empty() || rng.random_range(0..10) < 4 {
            None
        } else {
            Some(rng.random_range(0..documents.len()))
        };
        let doc_type = match parent {
            None => {
                let root_types = [
                    DocType::OfficialReview,
                    DocType::PublicReview,
                    DocType::AuthorComment,
                    DocType::PaperAbstract,
                ];
                let mut t = root_types[rng.random_range(0..root_types.len())];
                if t == DocType::PaperAbstract && has_abstract {
                    t = DocType::OfficialReview;
                }
                if t == DocType::PaperAbstract {
                    has_abstract = true;
                }
                t
            }
            Some(_) => {
                let reply_types = [
                    DocType::OfficialResponse,
                    DocType::PublicResponse,
                    DocType::AuthorResponse,
                ];
                reply_types[rng.random_range(0..reply_types.len())]
            }
        };
        let official = doc_type == DocType::OfficialReview;
        documents.push(Document {
            doc_id: format!("d{i}"),
            parent_id: parent.map(|p| format!("d{p}")),
            doc_type,
            text: {
                let n = rng.random_range(2..10);
                words(rng, n)
            },
            rating: official.then(|| rng.random_range(1..=10)),
            confidence: official.then(|| rng.random_range(1..=5)),
        });
    }

    Sample {
        paper_id: format!("paper-{}", rng.random_range(0..1_000_000)),
        venue: "synthetic".into(),
        acceptance: if rng.random_bool(0.5) {
            Acceptance::Accept
        } else {
            Acceptance::Reject
        },
        meta_review: {
            let n = rng.random_range(3..12);
            words(rng, n)
        },
        documents,
    }
}

/// Tiny distinct samples for memorization runs: one abstract plus one
/// official review, with short texts and a short meta-review.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<Sample> {
    let _ = seed; // texts are index-derived, the seed is kept for signature stability
    (0..n)
        .map(|i| {
            let topic_a = WORDS[(i * 3) % WORDS.len()];
            let topic_b = WORDS[(i * 7 + 5) % WORDS.len()];
            let accepted = i % 2 == 0;
            let verdict = if accepted { "accept" } else { "reject" };
            let rating = if accepted { 8 } else { 3 };
            Sample {
                paper_id: format!("toy-{i}"),
                venue: "toy".into(),
                acceptance: if accepted {
                    Acceptance::Accept
                } else {
                    Acceptance::Reject
                },
                meta_review: format!("the {topic_a} {topic_b} paper is a {verdict}"),
                documents: vec![
                    Document {
                        doc_id: "abs".into(),
                        parent_id: None,
                        doc_type: DocType::PaperAbstract,
                        text: format!("a study of {topic_a} {topic_b} methods"),
                        rating: None,
                        confidence: None,
                    },
                    Document {
                        doc_id: "rev".into(),
                        parent_id: None,
                        doc_type: DocType::OfficialReview,
                        text: format!("the {topic_a} work looks {verdict}"),
                        rating: Some(rating),
                        confidence: Some(((i % 5) + 1) as u8),
                    },
                ],
            }
        })
        .collect()
}

/// Synthetic corpus for smoke runs: multi-threaded forests, a mix of
/// conflicting and agreeing review ratings, and meta-reviews whose wording
/// separates accepted from rejected papers.
pub fn synthetic_corpus(n_papers: usize, seed: u64) -> Vec<Sample> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_papers)
        .map(|i| {
            let accepted = rng.random_bool(0.5);
            let conflicted = i % 4 == 0;
            let topic = WORDS[rng.random_range(0..WORDS.len())];
            let n_reviews = rng.random_range(2..=3);

            let mut documents = vec![Document {
                doc_id: format!("p{i}-abs"),
                parent_id: None,
                doc_type: DocType::PaperAbstract,
                text: format!("we present a {topic} method with {}", words(&mut rng, 6)),
                rating: None,
                confidence: None,
            }];

            for r in 0..n_reviews {
                let rating: u8 = if conflicted {
                    if r == 0 {
                        rng.random_range(8..=10)
                    } else if r == 1 {
                        rng.random_range(1..=3)
                    } else {
                        rng.random_range(4..=7)
                    }
                } else {
                    let base: u8 = if accepted { 7 } else { 4 };
                    base + rng.random_range(0..=1)
                };
                let review_id = format!("p{i}-r{r}");
                documents.push(Document {
                    doc_id: review_id.clone(),
                    parent_id: None,
                    doc_type: DocType::OfficialReview,
                    text: format!(
                        "the {topic} approach is {} and {}",
                        words(&mut rng, 3),
                        words(&mut rng, 4)
                    ),
                    rating: Some(rating),
                    confidence: Some(rng.random_range(2..=5)),
                });
                if rng.random_bool(0.7) {
                    let resp_id = format!("p{i}-r{r}-resp");
                    documents.push(Document {
                        doc_id: resp_id.clone(),
                        parent_id: Some(review_id.clone()),
                        doc_type: DocType::AuthorResponse,
                        text: format!("we thank the reviewer and {}", words(&mut rng, 5)),
                        rating: None,
                        confidence: None,
                    });
                    if rng.random_bool(0.4) {
                        documents.push(Document {
                            doc_id: format!("p{i}-r{r}-reply"),
                            parent_id: Some(resp_id),
                            doc_type: DocType::OfficialResponse,
                            text: format!("the response {}", words(&mut rng, 4)),
                            rating: None,
                            confidence: None,
                        });
                    }
                }
            }
            if rng.random_bool(0.3) {
                documents.push(Document {
                    doc_id: format!("p{i}-ac"),
                    parent_id: None,
                    doc_type: DocType::AuthorComment,
                    text: format!("overall response about {}", words(&mut rng, 5)),
                    rating: None,
                    confidence: None,
                });
            }

            let stance = if conflicted {
                "the reviewers disagree strongly"
            } else {
                "the reviewers broadly agree"
            };
            let verdict = if accepted {
                "i recommend acceptance of this paper"
            } else {
                "i recommend rejection of this paper"
            };
            Sample {
                paper_id: format!("syn-{i}"),
                venue: "synthetic".into(),
                acceptance: if accepted {
                    Acceptance::Accept
                } else {
                    Acceptance::Reject
                },
                meta_review: format!("{stance} on the {topic} method and {verdict}"),
                documents,
            }
        })
        .collect()
}

/// Render samples as an OpenReview-style notes dump (JSON array).
///
/// The inverse of dump conversion up to venue naming: converting the dump
/// back yields the same forests, texts and labels.
pub fn to_openreview_dump(samples: &[Sample]) -> serde_json::Value {
    let mut notes = Vec::new();
    for sample in samples {
        let forum = &sample.paper_id;
        let submission_id = format!("{forum}-sub");
        let mut abstract_text = "no abstract provided".to_string();
        for doc in &sample.documents {
            if doc.doc_type == DocType::PaperAbstract {
                abstract_text = doc.text.clone();
            }
        }
        notes.push(json!({
            "id": submission_id,
            "forum": forum,
            "replyto": null,
            "invitation": format!("{}/-/Blind_Submission", sample.venue),
            "signatures": [format!("{}/Authors", forum)],
            "content": {"title": format!("paper {forum}"), "abstract": abstract_text},
        }));
        for doc in &sample.documents {
            if doc.doc_type == DocType::PaperAbstract {
                continue;
            }
            let replyto = doc
                .parent_id
                .clone()
                .unwrap_or_else(|| submission_id.clone());
            let (invitation, signature, content) = match doc.doc_type {
                DocType::OfficialReview => (
                    "Official_Review",
                    format!("{forum}/Reviewer"),
                    json!({
                        "review": doc.text,
                        "rating": format!("{}: rating", doc.rating.unwrap_or(5)),
                        "confidence": format!("{}: confidence", doc.confidence.unwrap_or(3)),
                    }),
                ),
                DocType::PublicReview | DocType::PublicResponse => (
                    "Public_Comment",
                    format!("{forum}/Public"),
                    json!({"comment": doc.text}),
                ),
                DocType::AuthorComment | DocType::AuthorResponse => (
                    "Official_Comment",
                    format!("{forum}/Authors"),
                    json!({"comment": doc.text}),
                ),
                DocType::OfficialResponse => (
                    "Official_Comment",
                    format!("{forum}/Reviewer"),
                    json!({"comment": doc.text}),
                ),
                DocType::PaperAbstract => unreachable!(),
            };
            notes.push(json!({
                "id": doc.doc_id,
                "forum": forum,
                "replyto": replyto,
                "invitation": format!("{}/-/{}", sample.venue, invitation),
                "signatures": [signature],
                "content": content,
            }));
        }
        notes.push(json!({
            "id": format!("{forum}-decision"),
            "forum": forum,
            "replyto": submission_id,
            "invitation": format!("{}/-/Decision", sample.venue),
            "signatures": [format!("{}/Program_Chairs", forum)],
            "content": {
                "metareview": sample.meta_review,
                "decision": match sample.acceptance {
                    Acceptance::Accept => "Accept (poster)",
                    Acceptance::Reject => "Reject",
                },
            },
        }));
    }
    serde_json::Value::Array(notes)
}
