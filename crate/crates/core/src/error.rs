use std::io;

use thiserror::Error;

use crate::masking::OpId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} outside the representable range of the ring (k={k}, f={f})")]
    RangeOverflow { value: f64, k: u8, f: u8 },

    #[error("invalid quantization parameters k={k}, f={f}: need 1 <= f < k <= 64")]
    BadParams { k: u8, f: u8 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("operands use different quantization parameters")]
    ParamsMismatch,

    #[error("a public base was already issued for op {0}")]
    SketchReissue(OpId),

    #[error("bad sketch dimensions: m={m} must be smaller than d={d}")]
    BadDims { m: usize, d: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("kv cache holds {cached} positions but the step starts at {position}")]
    CacheInconsistent { cached: usize, position: usize },

    #[error("session exhausted: {needed} positions exceed max_seq {max_seq}")]
    SessionExhausted { needed: usize, max_seq: usize },

    #[error("invalid model config: {0}")]
    BadConfig(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("unknown op {0}")]
    UnknownOp(OpId),

    #[error("no restoration pool installed for op {0}")]
    MissingPool(OpId),

    #[error("transport closed: {0}")]
    TransportClosed(String),

    #[error("failed to bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },

    #[error("provider error {code}: {detail}")]
    Remote { code: u16, detail: String },

    #[error("unexpected message: {0}")]
    Unexpected(String),

    #[error("audit failed on clause {clause}: {detail}")]
    AuditFail { clause: AuditClause, detail: String },

    #[error("no view tap was installed for this run")]
    TapUnavailable,

    #[error("class {0} has no training examples")]
    EmptyClass(u32),

    #[error("dimension {0} too large for grid integration (max 3)")]
    DimTooLarge(usize),

    #[error("kernel of the public base is trivial")]
    TrivialKernel,

    #[error("run requested zero prompts")]
    EmptyRun,

    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The audit clause a transcript violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditClause {
    Schema,
    Direction,
    Uniformity,
    Freshness,
}

impl std::fmt::Display for AuditClause {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AuditClause::Schema => "schema",
            AuditClause::Direction => "direction",
            AuditClause::Uniformity => "uniformity",
            AuditClause::Freshness => "freshness",
        };
        f.write_str(name)
    }
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Wire code used when the error is reported inside an `Error` message.
    pub fn code(&self) -> u16 {
        match self {
            Error::ShapeMismatch(_) => 1,
            Error::ParamsMismatch => 2,
            Error::SketchReissue(_) => 3,
            Error::UnknownOp(_) => 4,
            Error::Decode(_) | Error::LengthMismatch { .. } => 5,
            Error::Unexpected(_) => 6,
            _ => 99,
        }
    }
}
