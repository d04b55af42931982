//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every forward operation; [`Tape::backward`] sweeps the
//! recorded nodes once in reverse order. All reductions run left to right so
//! repeated runs are bit-identical.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_store_gradients, relative_error, GradCheckReport, REL_FLOOR};
pub use checkpoint::{read_checkpoint, write_checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use optim::{sgd_step, Adam, ADAM_EPS};
pub use params::{Bindings, ParamGroup, Parameter, ParameterStore};
pub use tape::{BatchStats, Csr, Gradients, Tape, Var, BATCH_NORM_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("index {index} out of bounds ({bound}) in {op}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0} on empty input")]
    Empty(&'static str),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("batch normalization needs at least 2 rows in training mode, got {0}")]
    BatchTooSmall(usize),
    #[error("row {row} has norm below 1e-12")]
    ZeroNorm { row: usize },
    #[error("loss must be a single value, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on a value that does not depend on any parameter")]
    Detached,
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
