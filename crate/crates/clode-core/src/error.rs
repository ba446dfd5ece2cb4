//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ClodeError>;

#[derive(Debug, Error)]
pub enum ClodeError {
    /// Operand shapes do not conform for the named op.
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A forward op produced NaN or Inf.
    #[error("non-finite result in `{op}`")]
    NonFinite { op: String },

    /// A precondition on an argument failed.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Adaptive solver step fell below the stiffness threshold.
    #[error("step size underflow (stiffness failure): h = {h:.3e} over span {span:.3e}")]
    StepSizeUnderflow { h: f64, span: f64 },

    /// A data file failed to parse.
    #[error("data format error at line {line}: {message}")]
    DataFormat { line: usize, message: String },

    /// A checkpoint file is malformed, truncated, or version-incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// The training loss became NaN or Inf.
    #[error("non-finite loss at step {step} ({diagnostics})")]
    NonFiniteLoss { step: u64, diagnostics: String },

    /// A policy failed during a closed-loop rollout.
    #[error("policy failure for agent {agent} at step {step}: {source}")]
    PolicyFailure {
        agent: usize,
        step: usize,
        #[source]
        source: Box<ClodeError>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
