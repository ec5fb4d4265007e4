//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("softmax: row {row} has no finite entry")]
    FullyMaskedRow { row: usize },

    #[error("{op}: non-finite value in forward pass at row {row}")]
    NonFiniteValue { op: &'static str, row: usize },

    #[error("conv1d: kernel extent {extent} exceeds padded input of length {padded}")]
    KernelTooWide { extent: usize, padded: usize },

    #[error("routing: expert {expert} out of range (model has {num_experts})")]
    ExpertOutOfRange { expert: usize, num_experts: usize },

    #[error("routing: every expert is masked")]
    AllExpertsMasked,

    #[error("routing: teacher label {lang} is masked out")]
    TeacherLabelMasked { lang: usize },

    #[error("routing: teacher mode requires a ground-truth language label")]
    MissingTeacherLabel,

    #[error("ctc: target needs at least {required} frames but only {frames} are available")]
    InfeasibleTarget { required: usize, frames: usize },

    #[error("ctc: token {token} out of range for vocab {vocab} (0 is reserved for blank)")]
    BadToken { token: usize, vocab: usize },

    #[error("non-finite gradient for parameter '{param}'")]
    NonFiniteGradient { param: String },

    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("metrics: {hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code the CLI maps this error to: 1 for validation
    /// problems, 2 for divergence and failed verification checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } | Error::NonFiniteGradient { .. } | Error::Invariant(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
