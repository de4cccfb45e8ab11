use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gazetteer::{EMAIL_DOMAINS, FIRST_NAMES, LAST_NAMES, STREET_NAMES, STREET_SUFFIXES};
use super::{AnnotatedDocument, DatasetTag, EntityKind, SensitiveSpan};
use crate::error::{LabError, Result};

const TRACKING_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Generic stand-ins used by the PII-free corpus.
fn placeholders(kind: EntityKind) -> &'static [&'static str] {
    match kind {
        EntityKind::Name => &["the customer", "the account holder", "a student"],
        EntityKind::Phone => &["the number on file", "my usual number"],
        EntityKind::Email => &["my email address", "the email on file"],
        EntityKind::Address => &["the address on file", "my home address"],
        EntityKind::OrderId => &["the order number", "the number on my receipt"],
        EntityKind::TrackingId => &["the tracking code", "the code in your email"],
    }
}

struct Person {
    first: &'static str,
    last: &'static str,
}

impl Person {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Person {
            first: FIRST_NAMES.choose(rng).unwrap(),
            last: LAST_NAMES.choose(rng).unwrap(),
        }
    }

    fn full_name(&self) -> String {
        format!("{} {}", self.first, self.last)
    }

    fn email(&self, rng: &mut ChaCha8Rng) -> String {
        format!(
            "{}-{}@{}",
            self.first.to_lowercase(),
            self.last.to_lowercase(),
            EMAIL_DOMAINS.choose(rng).unwrap()
        )
    }
}

fn digits(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect()
}

fn phone(rng: &mut ChaCha8Rng) -> String {
    let sep = if rng.random_bool(0.5) { '.' } else { '-' };
    format!("{}{sep}{}{sep}{}", digits(rng, 3), digits(rng, 3), digits(rng, 4))
}

fn order_id(rng: &mut ChaCha8Rng) -> String {
    format!("{}-{}-{}", digits(rng, 3), digits(rng, 5), digits(rng, 4))
}

fn tracking_id(rng: &mut ChaCha8Rng) -> String {
    (0..10)
        .map(|_| char::from(*TRACKING_ALPHABET.choose(rng).unwrap()))
        .collect()
}

fn address(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{} {} {}",
        rng.random_range(1..10_000u32),
        STREET_NAMES.choose(rng).unwrap(),
        STREET_SUFFIXES.choose(rng).unwrap()
    )
}

/// Accumulates text and records the byte span of every sensitive slot.
struct DocBuilder {
    text: String,
    spans: Vec<SensitiveSpan>,
    with_pii: bool,
}

impl DocBuilder {
    fn new(with_pii: bool) -> Self {
        DocBuilder {
            text: String::new(),
            spans: Vec::new(),
            with_pii,
        }
    }

    fn lit(&mut self, s: &str) -> &mut Self {
        self.text.push_str(s);
        self
    }

    fn pick(&mut self, rng: &mut ChaCha8Rng, options: &[&str]) -> &mut Self {
        self.lit(options.choose(rng).unwrap())
    }

    /// Fills a slot: `value` when generating PII, otherwise a placeholder.
    fn slot(&mut self, rng: &mut ChaCha8Rng, kind: EntityKind, value: String) -> &mut Self {
        if self.with_pii {
            let start = self.text.len();
            self.text.push_str(&value);
            self.spans.push(SensitiveSpan {
                start,
                end: self.text.len(),
                kind,
            });
        } else {
            let filler = placeholders(kind).choose(rng).unwrap();
            self.text.push_str(filler);
        }
        self
    }

    fn finish(self, doc_id: String, dataset_tag: DatasetTag) -> AnnotatedDocument {
        AnnotatedDocument {
            doc_id,
            text: self.text,
            dataset_tag,
            spans: self.spans,
        }
    }
}

fn render_dialog(rng: &mut ChaCha8Rng, with_pii: bool) -> DocBuilder {
    let mut doc = DocBuilder::new(with_pii);
    let person = Person::sample(rng);
    doc.pick(rng, &["SYS: Hi, support here.\n", "SYS: Hello, how can I help?\n"]);
    doc.pick(
        rng,
        &[
            "USR: Where is my package?\n",
            "USR: I can't track my order.\n",
            "USR: My order is late.\n",
            "USR: I want to return a lamp.\n",
        ],
    );
    doc.pick(rng, &["SYS: Your name?\n", "SYS: May I have your name?\n"]);
    match rng.random_range(0..3) {
        0 => doc.lit("USR: ").slot(rng, EntityKind::Name, person.full_name()).lit("\n"),
        1 => doc.lit("USR: I am ").slot(rng, EntityKind::Name, person.full_name()).lit(".\n"),
        _ => doc.lit("USR: It is ").slot(rng, EntityKind::Name, person.full_name()).lit(".\n"),
    };
    if rng.random_bool(0.5) {
        let value = order_id(rng);
        doc.lit("SYS: Order number?\nUSR: ")
            .slot(rng, EntityKind::OrderId, value)
            .lit("\n");
    } else {
        let value = phone(rng);
        doc.lit("SYS: Phone number?\nUSR: ")
            .slot(rng, EntityKind::Phone, value)
            .lit("\n");
    }
    let value = tracking_id(rng);
    if rng.random_bool(0.5) {
        doc.lit("SYS: Tracking number: ")
            .slot(rng, EntityKind::TrackingId, value)
            .lit(".\n");
    } else {
        doc.lit("SYS: It ships as ")
            .slot(rng, EntityKind::TrackingId, value)
            .lit(". Anything else?\n");
    }
    doc.pick(rng, &["USR: No. Bye.", "USR: No, thanks.", "USR: Thanks!\nSYS: Bye!"]);
    doc
}

fn render_bio(rng: &mut ChaCha8Rng, with_pii: bool) -> DocBuilder {
    let mut doc = DocBuilder::new(with_pii);
    let person = Person::sample(rng);
    doc.lit("My name is ")
        .slot(rng, EntityKind::Name, person.full_name())
        .lit(", and I would like to share some aspects of my life with you. ");
    doc.pick(
        rng,
        &[
            "I study biology at the state college. ",
            "I work as a nurse at a local clinic. ",
            "I am a student of history and art. ",
            "I teach music to young children. ",
        ],
    );
    let home = address(rng);
    if rng.random_bool(0.5) {
        doc.lit("I currently reside at ")
            .slot(rng, EntityKind::Address, home)
            .lit(". ");
    } else {
        doc.lit("I live at ")
            .slot(rng, EntityKind::Address, home)
            .lit(" with my family. ");
    }
    let email = person.email(rng);
    let number = phone(rng);
    if rng.random_bool(0.5) {
        doc.lit("You can reach me by email at ")
            .slot(rng, EntityKind::Email, email)
            .lit(" or by phone at ")
            .slot(rng, EntityKind::Phone, number)
            .lit(".");
    } else {
        doc.lit("Feel free to email me at ")
            .slot(rng, EntityKind::Email, email)
            .lit(" or call ")
            .slot(rng, EntityKind::Phone, number)
            .lit(".");
    }
    doc
}

fn check_count(n_docs: usize) -> Result<()> {
    if n_docs == 0 {
        return Err(LabError::Config("n_docs must be at least 1".into()));
    }
    Ok(())
}

/// Customer-support dialogs carrying a name, an order id or phone number,
/// and a tracking id.
pub fn generate_dialog_corpus(seed: u64, n_docs: usize) -> Result<Vec<AnnotatedDocument>> {
    check_count(n_docs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_docs)
        .map(|i| render_dialog(&mut rng, true).finish(format!("dialog-{i:05}"), DatasetTag::Dialog))
        .collect())
}

/// First-person biographies carrying a name, address, email and phone number.
pub fn generate_bio_corpus(seed: u64, n_docs: usize) -> Result<Vec<AnnotatedDocument>> {
    check_count(n_docs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_docs)
        .map(|i| render_bio(&mut rng, true).finish(format!("bio-{i:05}"), DatasetTag::Bio))
        .collect())
}

/// Dialogs and biographies from the same templates with every PII slot
/// replaced by a placeholder. No spans.
pub fn generate_pretrain_corpus(seed: u64, n_docs: usize) -> Result<Vec<AnnotatedDocument>> {
    check_count(n_docs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_docs)
        .map(|i| {
            let doc = if rng.random_bool(0.5) {
                render_dialog(&mut rng, false)
            } else {
                render_bio(&mut rng, false)
            };
            doc.finish(format!("pretrain-{i:05}"), DatasetTag::Pretrain)
        })
        .collect())
}
