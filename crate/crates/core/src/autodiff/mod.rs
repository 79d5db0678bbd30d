//! Dense `f64` tensors, a define-by-run reverse-mode tape, Adam, and the
//! LSTM cell shared by every network.

mod adam;
mod checkpoint;
mod lstm;
mod tape;
mod tensor;

use alloc::string::String;
use alloc::vec::Vec;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC};
pub use lstm::{lstm_cell, Linear, LstmWeights, INIT_SCALE};
pub use tape::{Binary, Gradients, Tape, Unary, Var};
pub use tensor::{ModelParams, ParamId, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs a different element count than {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: value {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: index {index} out of bounds for {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(&'static str),
}
