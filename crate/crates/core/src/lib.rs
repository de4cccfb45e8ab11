//! Privacy, utility and efficiency of fine-tuning a tiny byte-level language
//! model three ways: full fine-tuning, differentially private SGD and LoRA.
//!
//! The pipeline runs from synthetic PII-bearing corpora ([`corpus`]) through
//! byte tokenization with per-token sensitivity labels ([`tokenize`]), a
//! small transformer with a hand-written backward pass ([`model`]), the three
//! update rules ([`finetune`]), masked loss measures ([`metrics`]) and
//! compute/memory accounting ([`efficiency`]) to experiment orchestration
//! ([`lab`]).

pub mod corpus;
pub mod efficiency;
pub mod error;
pub mod finetune;
pub mod lab;
pub mod metrics;
pub mod model;
pub mod tokenize;

pub use error::{LabError, Result};
