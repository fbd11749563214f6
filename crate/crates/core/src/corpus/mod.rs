//! MedQuAD-schema corpus ingestion: XML parsing, answer filtering, question-type
//! normalization, corpus statistics, and JSONL import/export.

mod ingest;
mod jsonl;
mod parse;

pub use ingest::{ingest_dir, IngestReport};
pub use jsonl::{export_jsonl, load_jsonl};
pub use parse::{parse_document, ParsedDocument, SkippedPair};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors produced by corpus parsing, serialization, and traversal.
#[derive(Debug, Error)]
pub enum CorpusError {
    /// The input is not well-formed XML.
    #[error("malformed XML at byte {offset}: {message}")]
    MalformedXml { offset: usize, message: String },
    /// The XML is well-formed but violates the document-level schema
    /// (e.g. the root `Document` element has no `id` attribute).
    #[error("schema violation in document '{document_id}' at byte {offset}: {message}")]
    SchemaViolation {
        document_id: String,
        offset: usize,
        message: String,
    },
    /// A JSONL line could not be decoded into a [`QARecord`].
    #[error("malformed JSONL record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// One medical question/answer pair with its question type and source document/URL.
///
/// Field declaration order fixes the JSON key order emitted by [`export_jsonl`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARecord {
    pub question_id: String,
    pub question_text: String,
    /// Possibly empty: unanswered pairs carry an empty string until filtered.
    pub answer_text: String,
    /// Lowercase, internal whitespace collapsed to single spaces.
    pub question_type: String,
    pub document_id: String,
    pub source_url: String,
    /// The disease/drug/entity the source document concerns.
    pub focus: String,
}

/// Corpus-level counts over a list of records.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_pairs: usize,
    pub answered_pairs: usize,
    pub distinct_question_types: usize,
    pub pairs_per_type: BTreeMap<String, usize>,
    pub documents: usize,
}

/// Normalizes a raw question type: trimmed, lowercased, internal whitespace
/// collapsed to single spaces.
pub fn normalize_question_type(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Returns true when the record counts as answered: the answer is non-empty
/// after Unicode-whitespace trimming.
pub fn is_answered(record: &QARecord) -> bool {
    !record.answer_text.trim().is_empty()
}

/// Retains exactly the answered records, preserving input order.
pub fn filter_answered(records: &[QARecord]) -> Vec<QARecord> {
    records.iter().filter(|r| is_answered(r)).cloned().collect()
}

/// Computes corpus statistics. Type counts cover answered records only, so
/// `pairs_per_type` sums to `answered_pairs` whether or not the input has
/// already been filtered.
pub fn compute_stats(records: &[QARecord]) -> CorpusStats {
    let mut pairs_per_type = BTreeMap::new();
    let mut documents = std::collections::BTreeSet::new();
    let mut answered = 0usize;
    for record in records {
        documents.insert(record.document_id.as_str());
        if is_answered(record) {
            answered += 1;
            *pairs_per_type.entry(record.question_type.clone()).or_insert(0) += 1;
        }
    }
    CorpusStats {
        total_pairs: records.len(),
        answered_pairs: answered,
        distinct_question_types: pairs_per_type.len(),
        pairs_per_type,
        documents: documents.len(),
    }
}

#[cfg(test)]
pub(crate) fn sample_record(qid: &str, qtype: &str, answer: &str) -> QARecord {
    QARecord {
        question_id: qid.to_string(),
        question_text: format!("What is (are) Glaucoma ? [{qid}]"),
        answer_text: answer.to_string(),
        question_type: qtype.to_string(),
        document_id: "0000001".to_string(),
        source_url: "https://www.nei.nih.gov/glaucoma".to_string(),
        focus: "Glaucoma".to_string(),
    }
}
