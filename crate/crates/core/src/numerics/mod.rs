//! Dense tensors, reverse-mode differentiation, the layer primitives the
//! model is built from, and the Adam optimizer.

mod adam;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use ops::{
    conv1d, dense, embed_lookup, log_softmax, lstm_cell_step, relu, softmax_cross_entropy,
    sum_over_time_pool, LstmWeights,
};
pub use params::{GradientMap, Param, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range for {bound} entries")]
    Index { index: usize, bound: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("usage error: {0}")]
    Usage(String),
}
