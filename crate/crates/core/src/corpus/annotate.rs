use std::cmp::Reverse;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::gazetteer::{EMAIL_DOMAINS, FIRST_NAMES, LAST_NAMES, STREET_NAMES, STREET_SUFFIXES};
use super::{EntityKind, SensitiveSpan};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternRule {
    pub kind: EntityKind,
    pub pattern: String,
}

/// Regular-expression rules per entity kind plus a first/last name gazetteer.
///
/// Names are matched as `First Last` with both parts drawn from the gazetteer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSet {
    pub rules: Vec<PatternRule>,
    pub first_names: Vec<String>,
    pub last_names: Vec<String>,
}

fn alternation<S: AsRef<str>>(words: &[S]) -> String {
    // longest first so leftmost-first alternation behaves as leftmost-longest
    let mut sorted: Vec<&str> = words.iter().map(AsRef::as_ref).collect();
    sorted.sort_by_key(|w| (Reverse(w.len()), *w));
    sorted.iter().map(|w| regex::escape(w)).collect::<Vec<_>>().join("|")
}

impl Default for PatternSet {
    fn default() -> Self {
        let rule = |kind, pattern: String| PatternRule { kind, pattern };
        PatternSet {
            rules: vec![
                rule(EntityKind::Phone, r"\b\d{3}[.-]\d{3}[.-]\d{4}\b".into()),
                rule(EntityKind::OrderId, r"\b\d{3}-\d{5}-\d{4}\b".into()),
                rule(EntityKind::TrackingId, r"\b[A-Z0-9]{10}\b".into()),
                rule(
                    EntityKind::Email,
                    format!(r"\b[a-z]+-[a-z]+@(?:{})\b", alternation(&EMAIL_DOMAINS)),
                ),
                rule(
                    EntityKind::Address,
                    format!(
                        r"\b\d{{1,5}} (?:{}) (?:{})\b",
                        alternation(&STREET_NAMES),
                        alternation(&STREET_SUFFIXES)
                    ),
                ),
            ],
            first_names: FIRST_NAMES.iter().map(|s| s.to_string()).collect(),
            last_names: LAST_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PatternSet {
    pub fn compile(&self) -> Result<Annotator> {
        let mut rules = Vec::with_capacity(self.rules.len() + 1);
        for rule in &self.rules {
            let re = Regex::new(&rule.pattern).map_err(|source| LabError::Pattern {
                kind: rule.kind.to_string(),
                source,
            })?;
            rules.push((rule.kind, re));
        }
        if !self.first_names.is_empty() && !self.last_names.is_empty() {
            let pattern = format!(
                r"\b(?:{}) (?:{})\b",
                alternation(&self.first_names),
                alternation(&self.last_names)
            );
            let re = Regex::new(&pattern).map_err(|source| LabError::Pattern {
                kind: EntityKind::Name.to_string(),
                source,
            })?;
            rules.push((EntityKind::Name, re));
        }
        Ok(Annotator { rules })
    }
}

/// A compiled [`PatternSet`].
#[derive(Debug, Clone)]
pub struct Annotator {
    rules: Vec<(EntityKind, Regex)>,
}

impl Annotator {
    /// All non-overlapping matches across rules, leftmost-longest, sorted by start.
    pub fn annotate(&self, text: &str) -> Vec<SensitiveSpan> {
        let mut candidates: Vec<SensitiveSpan> = self
            .rules
            .iter()
            .flat_map(|(kind, re)| {
                re.find_iter(text).map(move |m| SensitiveSpan {
                    start: m.start(),
                    end: m.end(),
                    kind: *kind,
                })
            })
            .filter(|s| s.start < s.end)
            .collect();
        candidates.sort_by_key(|s| (s.start, Reverse(s.end), s.kind));
        let mut spans: Vec<SensitiveSpan> = Vec::with_capacity(candidates.len());
        for span in candidates {
            if spans.last().is_none_or(|prev| span.start >= prev.end) {
                spans.push(span);
            }
        }
        spans
    }
}

/// Annotates `text` with a freshly compiled pattern set.
pub fn regex_annotate(text: &str, patterns: &PatternSet) -> Result<Vec<SensitiveSpan>> {
    Ok(patterns.compile()?.annotate(text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_bio_corpus, generate_dialog_corpus};

    fn spans_of(text: &str) -> Vec<(EntityKind, &str)> {
        regex_annotate(text, &PatternSet::default())
            .unwrap()
            .into_iter()
            .map(|s| (s.kind, &text[s.start..s.end]))
            .collect()
    }

    #[test]
    fn order_id_exemplar() {
        assert_eq!(spans_of("It's 843-58572-7002."), vec![(EntityKind::OrderId, "843-58572-7002")]);
    }

    #[test]
    fn empty_text() {
        assert!(spans_of("").is_empty());
    }

    #[test]
    fn adjacent_phones() {
        let text = "547.302.3744 201-555-0199";
        assert_eq!(
            regex_annotate(text, &PatternSet::default()).unwrap(),
            vec![
                SensitiveSpan { start: 0, end: 12, kind: EntityKind::Phone },
                SensitiveSpan { start: 13, end: 25, kind: EntityKind::Phone },
            ]
        );
    }

    #[test]
    fn table_exemplars() {
        assert_eq!(
            spans_of("My name is Phillip Martinez, email phillip-martinez@outlook.com"),
            vec![
                (EntityKind::Name, "Phillip Martinez"),
                (EntityKind::Email, "phillip-martinez@outlook.com"),
            ]
        );
        assert_eq!(
            spans_of("I reside at 4537 Tanglewood Trail."),
            vec![(EntityKind::Address, "4537 Tanglewood Trail")]
        );
        assert_eq!(
            spans_of("which is AGZIM5T6KL. reach me at 547.302.3744"),
            vec![(EntityKind::TrackingId, "AGZIM5T6KL"), (EntityKind::Phone, "547.302.3744")]
        );
    }

    #[test]
    fn malformed_pattern_is_a_config_error() {
        let mut set = PatternSet::default();
        set.rules.push(PatternRule {
            kind: EntityKind::Phone,
            pattern: "(unclosed".into(),
        });
        assert!(matches!(regex_annotate("x", &set), Err(LabError::Pattern { .. })));
    }

    #[test]
    fn longest_match_wins_across_rules() {
        let mut set = PatternSet::default();
        set.rules.push(PatternRule {
            kind: EntityKind::TrackingId,
            pattern: r"\d{3}".into(),
        });
        let spans = regex_annotate("id 843-58572-7002", &set).unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].kind, EntityKind::OrderId);
    }

    #[test]
    fn recovers_construction_spans() {
        let annotator = PatternSet::default().compile().unwrap();
        let mut docs = generate_dialog_corpus(7, 500).unwrap();
        docs.extend(generate_bio_corpus(7, 500).unwrap());
        for doc in docs {
            assert_eq!(annotator.annotate(&doc.text), doc.spans, "{}", doc.text);
        }
    }
}
