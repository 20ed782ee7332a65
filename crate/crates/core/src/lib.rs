//! Court-view generation with knowledge injection and guidance.
//!
//! A frozen toy decoder-only language model ([`lm`]) is steered by a
//! knowledge-injected prefix encoder ([`prompt`]) during training and by a
//! claim-label navigator ([`navigator`]) during greedy decoding. [`corpus`]
//! provides synthetic civil lending cases, [`eval`] the similarity and
//! claim-response metrics, and [`pipeline`] the end-to-end stages driven
//! by the `kig` command-line tool.

// Negated float comparisons (`!(x > 0.0)`) are used on purpose: they also
// reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod corpus;
pub mod eval;
pub mod lm;
pub mod navigator;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod prompt;
pub mod run;
pub mod train;

use kig_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("catalog: {0}")]
    Catalog(String),
    #[error("format: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible length bounds: {0}")]
    InfeasibleLengths(String),
    #[error("token {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("missing prerequisite: {0}")]
    Dependency(String),
    #[error("language model parameters changed: expected {expected}, found {found}")]
    LmNotFrozen { expected: String, found: String },
    #[error("{0}")]
    Mismatch(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Catalog(_) | Error::InfeasibleLengths(_) => 2,
            Error::Dependency(_) | Error::Mismatch(_) | Error::LmNotFrozen { .. } => 3,
            Error::Numerical(_) | Error::Tensor(TensorError::NonFinite { .. }) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
