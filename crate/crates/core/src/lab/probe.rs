//! Prefix-prompt extraction check: prompt with the bytes before a sensitive
//! span and see whether greedy decoding reproduces the value.

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedDocument, EntityKind};
use crate::error::{LabError, Result};
use crate::model::Transformer;
use crate::tokenize::BOS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub prefix_len: usize,
    pub kinds: Vec<EntityKind>,
    pub n_spans: usize,
    pub exact_matches: usize,
    /// `exact_matches / n_spans`, 0 when no span was probed.
    pub exact_match_rate: f64,
    /// Entry `L - 1` is the share of spans whose first `min(L, len)` bytes were
    /// reproduced, for `L` up to the longest probed value.
    pub match_rate_by_length: Vec<f64>,
}

/// Probes every span of the selected `kinds` (all kinds when empty). The
/// prompt is BOS followed by up to `prefix_len` bytes preceding the span,
/// shortened when prompt and value would not fit the context window.
pub fn recollection_probe(
    model: &Transformer<'_>,
    docs: &[AnnotatedDocument],
    prefix_len: usize,
    kinds: &[EntityKind],
) -> Result<ProbeReport> {
    if prefix_len == 0 {
        return Err(LabError::Config("prefix length must be at least 1".into()));
    }
    let context_len = model.state.config.context_len;
    let mut matched_lens = Vec::new();
    for doc in docs {
        for span in doc.spans.iter().filter(|s| kinds.is_empty() || kinds.contains(&s.kind)) {
            let value: Vec<u32> = doc.value(span).bytes().map(u32::from).collect();
            let room = context_len.saturating_sub(1 + value.len());
            let take = prefix_len.min(span.start).min(room);
            let mut prompt = Vec::with_capacity(1 + take + value.len());
            prompt.push(BOS);
            prompt.extend(doc.text.as_bytes()[span.start - take..span.start].iter().map(|&b| u32::from(b)));
            let mut matched = 0;
            if 1 + value.len() <= context_len {
                // stop at the first miss; later bytes cannot extend the match
                for &want in &value {
                    let next = *model.greedy_generate(&prompt, 1)?.last().unwrap();
                    if next != want {
                        break;
                    }
                    prompt.push(next);
                    matched += 1;
                }
            }
            matched_lens.push((matched, value.len()));
        }
    }
    let n_spans = matched_lens.len();
    let exact_matches = matched_lens.iter().filter(|(m, len)| m == len).count();
    let longest = matched_lens.iter().map(|&(_, len)| len).max().unwrap_or(0);
    let rate = |hits: usize| if n_spans == 0 { 0.0 } else { hits as f64 / n_spans as f64 };
    let match_rate_by_length = (1..=longest)
        .map(|l| rate(matched_lens.iter().filter(|&&(m, len)| m >= l.min(len)).count()))
        .collect();
    Ok(ProbeReport {
        prefix_len,
        kinds: kinds.to_vec(),
        n_spans,
        exact_matches,
        exact_match_rate: rate(exact_matches),
        match_rate_by_length,
    })
}
