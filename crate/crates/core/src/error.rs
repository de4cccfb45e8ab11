use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("span {start}..{end} out of bounds for text of {len} bytes")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },

    #[error("sequence of {len} tokens exceeds context window of {context_len}")]
    SequenceTooLong { len: usize, context_len: usize },

    #[error("invalid token id {0}")]
    InvalidToken(u32),

    #[error("token sequence does not decode: {0}")]
    Decode(String),

    #[error("split would leave the {0} side empty")]
    EmptySplit(&'static str),

    #[error("no {0} tokens to score")]
    NoTokens(&'static str),

    #[error("loss decomposition violated: all-token loss {all} vs weighted mean {weighted}")]
    Inconsistent { all: f64, weighted: f64 },

    #[error("instrumentation is not enabled")]
    InstrumentationDisabled,

    #[error("no checkpoint meets privacy threshold {0}")]
    NoFeasibleCheckpoint(f64),

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("malformed pattern for {kind}: {source}")]
    Pattern {
        kind: String,
        #[source]
        source: regex::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        LabError::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::NoFeasibleCheckpoint(_) => 3,
            LabError::Io { .. } | LabError::CorruptCheckpoint { .. } => 4,
            _ => 2,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
