//! Byte-level tokenization and per-token sensitivity masks.
//!
//! Every UTF-8 byte is its own token and a single BOS token (id 256) opens each
//! sequence. Because tokens never straddle byte boundaries, a span annotation
//! maps onto the mask exactly.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedDocument, SensitiveSpan};
use crate::error::{LabError, Result};

pub const BOS: u32 = 256;
pub const VOCAB_SIZE: usize = 257;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// One tokenized sequence (a whole document or one context window of it).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub doc_id: String,
    pub split_tag: SplitTag,
    pub token_ids: Vec<u32>,
    #[serde(rename = "mask", with = "bit_mask")]
    pub sensitivity_mask: Vec<bool>,
}

mod bit_mask {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(mask: &[bool], s: S) -> Result<S::Ok, S::Error> {
        mask.iter().map(|&b| u8::from(b)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let bits = Vec::<u8>::deserialize(d)?;
        bits.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("mask entry {other} is not 0 or 1"))),
            })
            .collect()
    }
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of next-token predictions this sequence contributes.
    pub fn n_targets(&self) -> usize {
        self.token_ids.len().saturating_sub(1)
    }

    /// Sensitivity label of each prediction, taken from its target token.
    pub fn target_mask(&self) -> &[bool] {
        &self.sensitivity_mask[1.min(self.sensitivity_mask.len())..]
    }

    pub fn check(&self) -> Result<()> {
        if self.token_ids.len() != self.sensitivity_mask.len() {
            return Err(LabError::Config(format!(
                "{}: {} tokens but {} mask entries",
                self.doc_id,
                self.token_ids.len(),
                self.sensitivity_mask.len()
            )));
        }
        if self.token_ids.first() != Some(&BOS) || self.sensitivity_mask[0] {
            return Err(LabError::Config(format!(
                "{}: sequence must open with an unmasked BOS",
                self.doc_id
            )));
        }
        if let Some(&bad) = self.token_ids[1..].iter().find(|&&t| t >= BOS) {
            return Err(LabError::InvalidToken(bad));
        }
        Ok(())
    }
}

pub fn tokenize(text: &str) -> Vec<u32> {
    std::iter::once(BOS)
        .chain(text.bytes().map(u32::from))
        .collect()
}

pub fn detokenize(ids: &[u32]) -> Result<String> {
    match ids.first() {
        Some(&BOS) => {}
        _ => return Err(LabError::Decode("sequence must begin with BOS".into())),
    }
    let bytes = ids[1..]
        .iter()
        .map(|&id| u8::try_from(id).map_err(|_| LabError::InvalidToken(id)))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| LabError::Decode(e.to_string()))
}

/// Marks every token whose byte lies inside a span. Position 0 is BOS.
pub fn align_spans_to_mask(text: &str, spans: &[SensitiveSpan]) -> Result<Vec<bool>> {
    let mut mask = vec![false; text.len() + 1];
    for span in spans {
        if span.start >= span.end || span.end > text.len() {
            return Err(LabError::SpanOutOfBounds {
                start: span.start,
                end: span.end,
                len: text.len(),
            });
        }
        mask[span.start + 1..span.end + 1].fill(true);
    }
    Ok(mask)
}

/// Tokenizes a document and cuts it into windows of at most `context_len`
/// tokens, each re-prefixed with BOS. Windows without a prediction target are
/// dropped.
pub fn encode_document(doc: &AnnotatedDocument, split_tag: SplitTag, context_len: usize) -> Result<Vec<TokenBatch>> {
    if context_len < 2 {
        return Err(LabError::Config("context window must hold at least two tokens".into()));
    }
    let tokens = tokenize(&doc.text);
    let mask = align_spans_to_mask(&doc.text, &doc.spans)?;
    let body = context_len - 1;
    Ok(tokens[1..]
        .chunks(body)
        .zip(mask[1..].chunks(body))
        .map(|(ids, bits)| TokenBatch {
            doc_id: doc.doc_id.clone(),
            split_tag,
            token_ids: std::iter::once(BOS).chain(ids.iter().copied()).collect(),
            sensitivity_mask: std::iter::once(false).chain(bits.iter().copied()).collect(),
        })
        .collect())
}

pub fn encode_corpus(docs: &[AnnotatedDocument], split_tag: SplitTag, context_len: usize) -> Result<Vec<TokenBatch>> {
    let mut out = Vec::with_capacity(docs.len());
    for doc in docs {
        out.extend(encode_document(doc, split_tag, context_len)?);
    }
    Ok(out)
}

pub fn write_batches(path: &Path, batches: &[TokenBatch]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for batch in batches {
        let line = serde_json::to_string(batch).map_err(|e| LabError::json(&batch.doc_id, e))?;
        writeln!(out, "{line}").map_err(|e| LabError::io(path, e))?;
    }
    out.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_batches(path: &Path) -> Result<Vec<TokenBatch>> {
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut batches = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let batch: TokenBatch = serde_json::from_str(&line)
            .map_err(|e| LabError::json(format!("{}:{}", path.display(), i + 1), e))?;
        batch.check()?;
        batches.push(batch);
    }
    Ok(batches)
}
