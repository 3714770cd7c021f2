//! Conversation-forest data model.
//!
//! One sample is a paper's review discussion: a forest of typed documents
//! (reviews, responses, comments and the paper abstract) together with the
//! reference meta-review, the acceptance outcome and the venue. Parsing
//! enforces the structural invariants the rest of the pipeline relies on:
//! parent links form a forest, review metadata appears only on official
//! reviews, and document order is stable because relation matrices index
//! documents by position.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The seven source-document types. The discriminants are stable codes
/// 0..=6 used as classification targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocType {
    OfficialReview = 0,
    PublicReview = 1,
    AuthorComment = 2,
    OfficialResponse = 3,
    PublicResponse = 4,
    AuthorResponse = 5,
    PaperAbstract = 6,
}

impl DocType {
    pub const COUNT: usize = 7;

    pub const ALL: [DocType; 7] = [
        DocType::OfficialReview,
        DocType::PublicReview,
        DocType::AuthorComment,
        DocType::OfficialResponse,
        DocType::PublicResponse,
        DocType::AuthorResponse,
        DocType::PaperAbstract,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<DocType> {
        DocType::ALL.get(code).copied()
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            DocType::OfficialReview => "official_review",
            DocType::PublicReview => "public_review",
            DocType::AuthorComment => "author_comment",
            DocType::OfficialResponse => "official_response",
            DocType::PublicResponse => "public_response",
            DocType::AuthorResponse => "author_response",
            DocType::PaperAbstract => "paper_abstract",
        }
    }
}

impl fmt::Display for DocType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Paper acceptance outcome. Code 0 = reject, 1 = accept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acceptance {
    Reject = 0,
    Accept = 1,
}

impl Acceptance {
    pub const COUNT: usize = 2;

    pub fn code(self) -> usize {
        self as usize
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            Acceptance::Reject => "reject",
            Acceptance::Accept => "accept",
        }
    }
}

impl fmt::Display for Acceptance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One source document in the conversation forest.
///
/// `parent_id` absent means the document is a thread root. `rating` (1-10)
/// and `confidence` (1-5) are present exactly when `doc_type` is
/// `official_review`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub parent_id: Option<String>,
    pub doc_type: DocType,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<u8>,
}

/// One paper's conversation forest plus its reference meta-review and
/// acceptance label. Document order is stable and defines matrix indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub paper_id: String,
    pub venue: String,
    pub acceptance: Acceptance,
    pub meta_review: String,
    pub documents: Vec<Document>,
}

/// Shape statistics of a sample's conversation forest. Roots are depth 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeStats {
    /// Maximum number of documents on any root-to-leaf path.
    pub height: usize,
    /// Maximum number of documents sharing a depth level across the forest.
    pub width: usize,
    pub n_docs: usize,
    /// Number of threads whose root has each document type, indexed by code.
    pub threads_by_type: [usize; DocType::COUNT],
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("document {child} references unknown parent {parent}")]
    DanglingParent { child: String, parent: String },
    #[error("parent links cycle through document {0}")]
    CycleDetected(String),
    #[error("{doc_type} document {doc_id} carries review metadata")]
    MetadataOnNonReview { doc_id: String, doc_type: DocType },
    #[error("unknown document {0}")]
    UnknownDocument(String),
}

/// Parse one JSON-lines record into a validated [`Sample`].
///
/// Unknown JSON fields are ignored; document list order is preserved.
pub fn parse_sample(line: &str) -> Result<Sample, ParseError> {
    let sample: Sample =
        serde_json::from_str(line).map_err(|e| ParseError::MalformedRecord(e.to_string()))?;
    validate_sample(&sample)?;
    Ok(sample)
}

/// Check every structural invariant of a sample.
pub fn validate_sample(sample: &Sample) -> Result<(), ParseError> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, doc) in sample.documents.iter().enumerate() {
        if index.insert(doc.doc_id.as_str(), i).is_some() {
            return Err(ParseError::MalformedRecord(format!(
                "duplicate doc_id {}",
                doc.doc_id
            )));
        }
    }

    let mut abstracts = 0usize;
    for doc in &sample.documents {
        if doc.text.is_empty() {
            return Err(ParseError::MalformedRecord(format!(
                "document {} has empty text",
                doc.doc_id
            )));
        }
        if doc.doc_type == DocType::OfficialReview {
            let rating = doc.rating.ok_or_else(|| {
                ParseError::MalformedRecord(format!(
                    "official review {} is missing a rating",
                    doc.doc_id
                ))
            })?;
            let confidence = doc.confidence.ok_or_else(|| {
                ParseError::MalformedRecord(format!(
                    "official review {} is missing a confidence",
                    doc.doc_id
                ))
            })?;
            if !(1..=10).contains(&rating) {
                return Err(ParseError::MalformedRecord(format!(
                    "rating {rating} out of range [1,10] on {}",
                    doc.doc_id
                )));
            }
            if !(1..=5).contains(&confidence) {
                return Err(ParseError::MalformedRecord(format!(
                    "confidence {confidence} out of range [1,5] on {}",
                    doc.doc_id
                )));
            }
        } else if doc.rating.is_some() || doc.confidence.is_some() {
            return Err(ParseError::MetadataOnNonReview {
                doc_id: doc.doc_id.clone(),
                doc_type: doc.doc_type,
            });
        }
        if doc.doc_type == DocType::PaperAbstract {
            abstracts += 1;
            if abstracts > 1 {
                return Err(ParseError::MalformedRecord(
                    "more than one paper_abstract document".into(),
                ));
            }
            if doc.parent_id.is_some() {
                return Err(ParseError::MalformedRecord(format!(
                    "paper_abstract {} is not a thread root",
                    doc.doc_id
                )));
            }
        }
        if let Some(parent) = &doc.parent_id {
            if !index.contains_key(parent.as_str()) {
                return Err(ParseError::DanglingParent {
                    child: doc.doc_id.clone(),
                    parent: parent.clone(),
                });
            }
        }
    }

    // Walking up from any document must reach a root within n steps.
    let n = sample.documents.len();
    for doc in &sample.documents {
        let mut current = doc;
        let mut steps = 0usize;
        while let Some(parent) = &current.parent_id {
            steps += 1;
            if steps > n {
                return Err(ParseError::CycleDetected(doc.doc_id.clone()));
            }
            current = &sample.documents[index[parent.as_str()]];
        }
    }
    Ok(())
}

impl Sample {
    /// Serialize as one JSON line (inverse of [`parse_sample`]).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("sample serialization cannot fail")
    }

    pub fn n_docs(&self) -> usize {
        self.documents.len()
    }

    pub fn index_of(&self, doc_id: &str) -> Option<usize> {
        self.documents.iter().position(|d| d.doc_id == doc_id)
    }

    /// Parent position of each document, `None` for thread roots.
    ///
    /// Requires a validated sample (every parent resolves).
    pub fn parent_indices(&self) -> Vec<Option<usize>> {
        let index: HashMap<&str, usize> = self
            .documents
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.as_str(), i))
            .collect();
        self.documents
            .iter()
            .map(|d| d.parent_id.as_deref().map(|p| index[p]))
            .collect()
    }

    /// Depth of each document; thread roots are depth 1.
    pub fn depths(&self) -> Vec<usize> {
        let parents = self.parent_indices();
        let mut depths = vec![0usize; parents.len()];
        for i in 0..parents.len() {
            let mut depth = 1;
            let mut cur = i;
            while let Some(p) = parents[cur] {
                depth += 1;
                cur = p;
            }
            depths[i] = depth;
        }
        depths
    }

    /// Positions of the official-review documents, in document order.
    pub fn official_review_indices(&self) -> Vec<usize> {
        self.documents
            .iter()
            .enumerate()
            .filter(|(_, d)| d.doc_type == DocType::OfficialReview)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Forest shape statistics; see [`TreeStats`].
pub fn tree_stats(sample: &Sample) -> TreeStats {
    let depths = sample.depths();
    let n_docs = sample.documents.len();
    let height = depths.iter().copied().max().unwrap_or(0);
    let mut per_level: HashMap<usize, usize> = HashMap::new();
    for &d in &depths {
        *per_level.entry(d).or_insert(0) += 1;
    }
    let width = per_level.values().copied().max().unwrap_or(0);
    let mut threads_by_type = [0usize; DocType::COUNT];
    for doc in &sample.documents {
        if doc.parent_id.is_none() {
            threads_by_type[doc.doc_type.code()] += 1;
        }
    }
    TreeStats {
        height,
        width,
        n_docs,
        threads_by_type,
    }
}

/// The unique ancestor of `doc_id` with no parent (itself if it is a root).
pub fn thread_root<'a>(sample: &'a Sample, doc_id: &str) -> Result<&'a str, ParseError> {
    let mut idx = sample
        .index_of(doc_id)
        .ok_or_else(|| ParseError::UnknownDocument(doc_id.to_string()))?;
    let parents = sample.parent_indices();
    while let Some(p) = parents[idx] {
        idx = p;
    }
    Ok(&sample.documents[idx].doc_id)
}

/// Root position of every document.
pub fn thread_root_indices(sample: &Sample) -> Vec<usize> {
    let parents = sample.parent_indices();
    (0..parents.len())
        .map(|mut i| {
            while let Some(p) = parents[i] {
                i = p;
            }
            i
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: ParseError },
}

/// Read a JSON-lines corpus, validating every sample. Blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>, JsonlError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_sample(&line).map_err(|source| JsonlError::Parse {
            line: lineno + 1,
            source,
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Write samples as a JSON-lines corpus.
pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<(), JsonlError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for sample in samples {
        writeln!(file, "{}", sample.to_json_line())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// OpenReview-style dump conversion
// ---------------------------------------------------------------------------

/// One note in an OpenReview-style JSON dump (array of notes).
#[derive(Debug, Clone, Deserialize)]
pub struct RawNote {
    pub id: String,
    pub forum: String,
    #[serde(default)]
    pub replyto: Option<String>,
    pub invitation: String,
    #[serde(default)]
    pub signatures: Vec<String>,
    #[serde(default)]
    pub content: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConvertWarning {
    /// Forum has no decision note; the sample is dropped.
    NoDecisionNote { forum: String },
    /// Forum has more than one decision note; the sample is dropped rather
    /// than guessing which decision is authoritative.
    AmbiguousDecision { forum: String },
    /// A note could not be mapped into a document and was skipped.
    NoteSkipped { note: String, reason: String },
    /// A reply target did not resolve to a kept document; the document was
    /// promoted to a thread root.
    Reparented { note: String },
}

impl fmt::Display for ConvertWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvertWarning::NoDecisionNote { forum } => {
                write!(f, "forum {forum}: no decision note, sample dropped")
            }
            ConvertWarning::AmbiguousDecision { forum } => {
                write!(f, "forum {forum}: multiple decision notes, sample dropped")
            }
            ConvertWarning::NoteSkipped { note, reason } => {
                write!(f, "note {note} skipped: {reason}")
            }
            ConvertWarning::Reparented { note } => {
                write!(f, "note {note}: reply target not kept, promoted to thread root")
            }
        }
    }
}

#[derive(Debug)]
pub struct ConversionReport {
    pub samples: Vec<Sample>,
    pub warnings: Vec<ConvertWarning>,
    pub skipped_notes: usize,
}

#[derive(Debug, Error)]
pub enum ConvertError {
    #[error("dump is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn content_str<'a>(note: &'a RawNote, key: &str) -> Option<&'a str> {
    note.content.get(key).and_then(|v| v.as_str())
}

/// Parse a rating/confidence value that is either an integer or a string
/// with a leading integer such as `"8: strong accept"`.
fn parse_scale(value: &serde_json::Value) -> Option<u8> {
    match value {
        serde_json::Value::Number(n) => n.as_u64().and_then(|v| u8::try_from(v).ok()),
        serde_json::Value::String(s) => {
            let digits: String = s.chars().take_while(|c| c.is_ascii_digit()).collect();
            digits.parse().ok()
        }
        _ => None,
    }
}

fn invitation_suffix(invitation: &str) -> &str {
    invitation.rsplit('/').next().unwrap_or(invitation)
}

fn is_author_note(note: &RawNote) -> bool {
    note.signatures
        .iter()
        .any(|s| s.to_ascii_lowercase().contains("author"))
}

/// Convert an OpenReview-style notes dump into validated samples.
///
/// Notes are grouped by forum; the decision note's text becomes the
/// meta-review and reply links become parent links. Reviews and top-level
/// comments become thread roots (the submission note itself becomes the
/// paper-abstract document). Unmapped note kinds are skipped and counted.
pub fn convert_openreview_dump(raw: &str) -> Result<ConversionReport, ConvertError> {
    let notes: Vec<RawNote> = serde_json::from_str(raw)?;
    let mut forums: Vec<String> = Vec::new();
    let mut by_forum: HashMap<String, Vec<&RawNote>> = HashMap::new();
    for note in &notes {
        if !by_forum.contains_key(&note.forum) {
            forums.push(note.forum.clone());
        }
        by_forum.entry(note.forum.clone()).or_default().push(note);
    }

    let mut report = ConversionReport {
        samples: Vec::new(),
        warnings: Vec::new(),
        skipped_notes: 0,
    };

    for forum in &forums {
        let notes = &by_forum[forum];
        let submission_id = notes
            .iter()
            .find(|n| invitation_suffix(&n.invitation).contains("Submission"))
            .map(|n| n.id.clone());

        let mut decision: Option<&RawNote> = None;
        let mut ambiguous = false;
        let mut documents: Vec<Document> = Vec::new();

        for note in notes {
            let suffix = invitation_suffix(&note.invitation);
            if suffix.contains("Decision") || suffix.contains("Meta_Review") {
                if decision.is_some() {
                    ambiguous = true;
                }
                decision = Some(note);
                continue;
            }

            let top_level = note.replyto.is_none()
                || note.replyto.as_deref() == submission_id.as_deref()
                || note.replyto.as_deref() == Some(forum.as_str());

            let mapped: Option<(DocType, String)> = if suffix.contains("Submission") {
                content_str(note, "abstract").map(|t| (DocType::PaperAbstract, t.to_string()))
            } else if suffix.contains("Official_Review") {
                content_str(note, "review")
                    .or_else(|| content_str(note, "comment"))
                    .map(|t| (DocType::OfficialReview, t.to_string()))
            } else if suffix.contains("Official_Comment") {
                let text = content_str(note, "comment").map(str::to_string);
                text.map(|t| {
                    if is_author_note(note) {
                        if top_level {
                            (DocType::AuthorComment, t)
                        } else {
                            (DocType::AuthorResponse, t)
                        }
                    } else {
                        (DocType::OfficialResponse, t)
                    }
                })
            } else if suffix.contains("Public_Comment") || suffix.contains("Public_Review") {
                let text = content_str(note, "comment")
                    .or_else(|| content_str(note, "review"))
                    .map(str::to_string);
                text.map(|t| {
                    if top_level {
                        (DocType::PublicReview, t)
                    } else {
                        (DocType::PublicResponse, t)
                    }
                })
            } else {
                None
            };

            let Some((doc_type, text)) = mapped else {
                report.skipped_notes += 1;
                report.warnings.push(ConvertWarning::NoteSkipped {
                    note: note.id.clone(),
                    reason: format!("unmapped invitation {}", note.invitation),
                });
                continue;
            };
            if text.is_empty() {
                report.skipped_notes += 1;
                report.warnings.push(ConvertWarning::NoteSkipped {
                    note: note.id.clone(),
                    reason: "empty text".into(),
                });
                continue;
            }

            let (rating, confidence) = if doc_type == DocType::OfficialReview {
                let rating = note.content.get("rating").and_then(parse_scale);
                let confidence = note.content.get("confidence").and_then(parse_scale);
                match (rating, confidence) {
                    (Some(r), Some(c)) => (Some(r), Some(c)),
                    _ => {
                        report.skipped_notes += 1;
                        report.warnings.push(ConvertWarning::NoteSkipped {
                            note: note.id.clone(),
                            reason: "official review without rating/confidence".into(),
                        });
                        continue;
                    }
                }
            } else {
                (None, None)
            };

            documents.push(Document {
                doc_id: note.id.clone(),
                parent_id: if top_level {
                    None
                } else {
                    note.replyto.clone()
                },
                doc_type,
                text,
                rating,
                confidence,
            });
        }

        if ambiguous {
            report
                .warnings
                .push(ConvertWarning::AmbiguousDecision { forum: forum.clone() });
            continue;
        }
        let Some(decision) = decision else {
            report
                .warnings
                .push(ConvertWarning::NoDecisionNote { forum: forum.clone() });
            continue;
        };

        // Replies whose target was skipped (or was the decision note) become
        // thread roots so the forest stays closed.
        let kept: HashMap<String, ()> = documents
            .iter()
            .map(|d| (d.doc_id.clone(), ()))
            .collect();
        for doc in &mut documents {
            if let Some(parent) = doc.parent_id.clone() {
                if !kept.contains_key(&parent) {
                    doc.parent_id = None;
                    report
                        .warnings
                        .push(ConvertWarning::Reparented { note: doc.doc_id.clone() });
                }
            }
        }

        let meta_review = content_str(decision, "metareview")
            .or_else(|| content_str(decision, "comment"))
            .unwrap_or("")
            .to_string();
        let accepted = content_str(decision, "decision")
            .or_else(|| content_str(decision, "recommendation"))
            .map(|d| d.to_ascii_lowercase().contains("accept"))
            .unwrap_or(false);
        let venue = decision
            .invitation
            .split('/')
            .next()
            .unwrap_or("unknown")
            .to_string();

        let sample = Sample {
            paper_id: forum.clone(),
            venue,
            acceptance: if accepted {
                Acceptance::Accept
            } else {
                Acceptance::Reject
            },
            meta_review,
            documents,
        };
        match validate_sample(&sample) {
            Ok(()) => report.samples.push(sample),
            Err(err) => report.warnings.push(ConvertWarning::NoteSkipped {
                note: forum.clone(),
                reason: format!("converted sample invalid: {err}"),
            }),
        }
    }

    Ok(report)
}
