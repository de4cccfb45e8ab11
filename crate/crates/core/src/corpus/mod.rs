//! Synthetic PII-bearing corpora with sensitive spans known by construction.
//!
//! Two fine-tuning corpora mimic customer-support dialogs and first-person
//! biographies; a third, PII-free corpus shares their templates but fills every
//! slot with a generic placeholder and serves as pretraining data. Spans are
//! byte offsets into the UTF-8 text so they align exactly with byte tokens.

mod annotate;
pub mod gazetteer;
mod generate;
mod split;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub use annotate::{regex_annotate, Annotator, PatternRule, PatternSet};
pub use generate::{generate_bio_corpus, generate_dialog_corpus, generate_pretrain_corpus};
pub use split::split_train_test;

/// Category of a sensitive entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Name,
    Phone,
    Email,
    Address,
    OrderId,
    TrackingId,
}

impl EntityKind {
    pub const ALL: [EntityKind; 6] = [
        EntityKind::Name,
        EntityKind::Phone,
        EntityKind::Email,
        EntityKind::Address,
        EntityKind::OrderId,
        EntityKind::TrackingId,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Name => "name",
            EntityKind::Phone => "phone",
            EntityKind::Email => "email",
            EntityKind::Address => "address",
            EntityKind::OrderId => "order_id",
            EntityKind::TrackingId => "tracking_id",
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        EntityKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| LabError::Config(format!("unknown entity kind `{s}`")))
    }
}

/// A byte range `[start, end)` of a document holding one PII value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveSpan {
    pub start: usize,
    pub end: usize,
    pub kind: EntityKind,
}

impl SensitiveSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Dialog,
    Bio,
    Pretrain,
}

impl FromStr for DatasetTag {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dialog" => Ok(DatasetTag::Dialog),
            "bio" => Ok(DatasetTag::Bio),
            "pretrain" => Ok(DatasetTag::Pretrain),
            other => Err(LabError::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    pub doc_id: String,
    pub text: String,
    pub dataset_tag: DatasetTag,
    pub spans: Vec<SensitiveSpan>,
}

impl AnnotatedDocument {
    /// The substring covered by `span`.
    pub fn value(&self, span: &SensitiveSpan) -> &str {
        &self.text[span.start..span.end]
    }

    /// Checks span bounds, ordering and non-overlap.
    pub fn validate(&self) -> Result<()> {
        let len = self.text.len();
        let mut prev_end = 0;
        for span in &self.spans {
            if span.start >= span.end || span.end > len {
                return Err(LabError::SpanOutOfBounds {
                    start: span.start,
                    end: span.end,
                    len,
                });
            }
            if span.start < prev_end {
                return Err(LabError::Config(format!(
                    "{}: span at {} overlaps or is out of order",
                    self.doc_id, span.start
                )));
            }
            if !self.text.is_char_boundary(span.start) || !self.text.is_char_boundary(span.end) {
                return Err(LabError::Config(format!(
                    "{}: span {}..{} splits a character",
                    self.doc_id, span.start, span.end
                )));
            }
            prev_end = span.end;
        }
        if self.dataset_tag == DatasetTag::Pretrain && !self.spans.is_empty() {
            return Err(LabError::Config(format!(
                "{}: pretrain documents carry no spans",
                self.doc_id
            )));
        }
        Ok(())
    }
}

/// Generates the fine-tuning corpus for `tag` (dialog or bio).
pub fn generate_corpus(tag: DatasetTag, seed: u64, n_docs: usize) -> Result<Vec<AnnotatedDocument>> {
    match tag {
        DatasetTag::Dialog => generate_dialog_corpus(seed, n_docs),
        DatasetTag::Bio => generate_bio_corpus(seed, n_docs),
        DatasetTag::Pretrain => generate_pretrain_corpus(seed, n_docs),
    }
}

/// Writes documents as JSON Lines.
pub fn write_jsonl(path: &Path, docs: &[AnnotatedDocument]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for doc in docs {
        let line = serde_json::to_string(doc).map_err(|e| LabError::json(&doc.doc_id, e))?;
        writeln!(out, "{line}").map_err(|e| LabError::io(path, e))?;
    }
    out.flush().map_err(|e| LabError::io(path, e))
}

/// Reads and validates a JSON Lines corpus.
pub fn read_jsonl(path: &Path) -> Result<Vec<AnnotatedDocument>> {
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: AnnotatedDocument = serde_json::from_str(&line)
            .map_err(|e| LabError::json(format!("{}:{}", path.display(), i + 1), e))?;
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_line_shape() {
        let doc = AnnotatedDocument {
            doc_id: "d0".into(),
            text: "It's 843-58572-7002.".into(),
            dataset_tag: DatasetTag::Dialog,
            spans: vec![SensitiveSpan {
                start: 5,
                end: 19,
                kind: EntityKind::OrderId,
            }],
        };
        let line = serde_json::to_string(&doc).unwrap();
        assert_eq!(
            line,
            r#"{"doc_id":"d0","text":"It's 843-58572-7002.","dataset_tag":"dialog","spans":[{"start":5,"end":19,"kind":"order_id"}]}"#
        );
    }

    #[test]
    fn jsonl_file_round_trip() {
        let docs = generate_dialog_corpus(3, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_jsonl(&path, &docs).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), docs);
    }

    #[test]
    fn validate_rejects_bad_spans() {
        let mut doc = AnnotatedDocument {
            doc_id: "d".into(),
            text: "abc".into(),
            dataset_tag: DatasetTag::Bio,
            spans: vec![SensitiveSpan {
                start: 1,
                end: 4,
                kind: EntityKind::Name,
            }],
        };
        assert!(doc.validate().is_err());
        doc.spans = vec![
            SensitiveSpan { start: 0, end: 2, kind: EntityKind::Name },
            SensitiveSpan { start: 1, end: 3, kind: EntityKind::Name },
        ];
        assert!(doc.validate().is_err());
    }

    #[test]
    fn entity_kind_parse() {
        for kind in EntityKind::ALL {
            assert_eq!(kind.as_str().parse::<EntityKind>().unwrap(), kind);
        }
        assert!("ssn".parse::<EntityKind>().is_err());
    }
}
