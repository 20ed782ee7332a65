//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! The crate is deliberately small: a value type ([`Tensor`]), a named
//! parameter collection ([`ParamSet`]), a linear [`Tape`] whose backward
//! rules are written out per operation, an [`Adam`] optimizer, a finite
//! difference checker, and a versioned binary [`Checkpoint`] container.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use optim::Adam;
pub use tape::{Gradients, Tape, Var, PROB_EPS};
pub use tensor::{ParamId, ParamSet, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("ragged rows")]
    Ragged,
    #[error("expected rank <= {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("tensor has no gradient buffer")]
    NoGrad,
    #[error("optimizer step without populated gradients")]
    MissingGradients,
    #[error("optimizer state does not match the parameter set")]
    OptimizerMismatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
