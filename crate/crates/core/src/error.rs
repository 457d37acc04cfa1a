use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes; the CLI maps each to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

impl ErrorClass {
    /// Process exit code: 2 config, 3 data, 4 runtime.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Runtime => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("no complete residues in structure input")]
    EmptyStructure,

    #[error("multiple chains found ({0:?}); only single-chain structures are supported")]
    MultiChain(Vec<char>),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty residue sequence")]
    EmptySequence,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("fusion mode {mode} requires the {modality} representation")]
    MissingModality {
        mode: &'static str,
        modality: &'static str,
    },

    #[error("question holds {placeholders} protein placeholders but {proteins} proteins were supplied")]
    PlaceholderMismatch { placeholders: usize, proteins: usize },

    #[error("sequence of {len} positions exceeds the decoder context of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("annotation record {0} has no usable fields")]
    EmptyRecord(String),

    #[error("label {label} is not valid for task {task}")]
    UnknownLabel { task: String, label: String },

    #[error("task {0} is not supported here")]
    UnsupportedTask(String),

    #[error("need at least {needed} examples, got {got}")]
    TooFewExamples { needed: usize, got: usize },

    #[error("manifest {path}: {reason}")]
    ManifestSchema { path: PathBuf, reason: String },

    #[error("unknown protein id {0}")]
    UnknownProtein(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint was written for a different model configuration")]
    CheckpointConfig,

    #[error("invalid override {key}: {reason}")]
    InvalidOverride { key: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("expected {expected} per-seed scores, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("non-finite loss at step {step} (batch examples {batch:?})")]
    NonFiniteLoss { step: usize, batch: Vec<usize> },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            InvalidOverride { .. } | Config(_) | Arity { .. } | CheckpointConfig => {
                ErrorClass::Config
            }
            MalformedRecord { .. }
            | EmptyStructure
            | MultiChain(_)
            | EmptySequence
            | EmptyRecord(_)
            | UnknownLabel { .. }
            | TooFewExamples { .. }
            | ManifestSchema { .. }
            | UnknownProtein(_)
            | MissingInput(_)
            | CheckpointVersion { .. }
            | CheckpointCorrupt(_)
            | Json(_) => ErrorClass::Data,
            _ => ErrorClass::Runtime,
        }
    }
}
