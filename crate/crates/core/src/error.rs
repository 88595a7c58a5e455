use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid identifier {0:?}: must be non-empty and free of whitespace and brackets")]
    InvalidIdentifier(String),
    #[error("identifier base {0:?} is used more than once")]
    DuplicateIdentifier(String),
    #[error("unknown prompt kind {0:?}")]
    UnknownPromptKind(String),
    #[error("repetition counts must be >= 1 (n_s = {n_s}, n_c = {n_c})")]
    InvalidRepetition { n_s: usize, n_c: usize },
    #[error("training prompt {kind} requires n_s = n_c = 1")]
    TrainingPromptRepetition { kind: &'static str },
    #[error("prompt kind {0} has no content index")]
    NoContentIndex(&'static str),
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("empty token sequence")]
    EmptyTokens,

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("schedule requires at least one step")]
    EmptySchedule,
    #[error("unknown schedule kind {0:?}")]
    UnknownScheduleKind(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside schedule range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("step order violation: t_prev = {t_prev} > t = {t}")]
    StepOrder { t: usize, t_prev: usize },
    #[error("alpha at timestep {0} is zero")]
    ZeroAlpha(usize),
    #[error("cannot draw {steps} sampler steps from a {max}-step schedule")]
    TooManySteps { steps: usize, max: usize },

    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("parameter count {count} exceeds bound {bound}")]
    TooManyParameters { count: usize, bound: usize },
    #[error("attention replay exhausted: step {step} requested, {recorded} recorded")]
    ReplayExhausted { step: usize, recorded: usize },
    #[error("attention map mismatch at layer {layer}: recorded {recorded}, live {live}")]
    AttentionMismatch {
        layer: usize,
        recorded: String,
        live: String,
    },
    #[error("content index {index} outside prompt of length {len}")]
    ContentIndexRange { index: usize, len: usize },
    #[error("prompt length mismatch: recording used {recorded} tokens, replay has {replay}")]
    PromptLengthMismatch { recorded: usize, replay: usize },
    #[error("trajectory mismatch: {0}")]
    TrajectoryMismatch(String),

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("invalid trainer config: {0}")]
    TrainerConfig(String),
    #[error("auxiliary image set is empty (set the no-aux flag to train without it)")]
    EmptyAuxSet,

    #[error("config error at line {line}: {msg}")]
    ConfigSyntax { line: usize, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownConfigKey(String),
    #[error("invalid value for {key}: {msg}")]
    ConfigValue { key: String, msg: String },
    #[error("the paper profile needs the explicit GPU acknowledgment flag")]
    PaperProfileRefused,

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { what, msg: msg.into() }
    }

    /// Short machine-readable tag for CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidIdentifier(_) | Error::DuplicateIdentifier(_) => "identifier",
            Error::UnknownPromptKind(_)
            | Error::InvalidRepetition { .. }
            | Error::TrainingPromptRepetition { .. }
            | Error::NoContentIndex(_) => "prompt",
            Error::TokenOutOfRange { .. } | Error::EmptyTokens => "text",
            Error::Shape { .. } | Error::InvalidImage(_) => "shape",
            Error::EmptySchedule
            | Error::UnknownScheduleKind(_)
            | Error::InvalidSchedule(_)
            | Error::TimestepOutOfRange { .. }
            | Error::StepOrder { .. }
            | Error::ZeroAlpha(_)
            | Error::TooManySteps { .. } => "schedule",
            Error::NonFinite(_) | Error::TooManyParameters { .. } => "denoiser",
            Error::ReplayExhausted { .. }
            | Error::AttentionMismatch { .. }
            | Error::ContentIndexRange { .. }
            | Error::PromptLengthMismatch { .. }
            | Error::TrajectoryMismatch(_) => "attention",
            Error::NonFiniteLoss(_) | Error::TrainerConfig(_) | Error::EmptyAuxSet => "train",
            Error::ConfigSyntax { .. }
            | Error::UnknownConfigKey(_)
            | Error::ConfigValue { .. }
            | Error::PaperProfileRefused => "config",
            Error::Format { .. } | Error::CheckpointMismatch(_) => "format",
            Error::Io { .. } => "io",
        }
    }
}
