//! Reverse-mode differentiation over dense tensors, with the layers and
//! optimizer the model needs.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod params;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::{BatchMoments, Conv2dConfig};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{BackwardCtx, Gradients, Graph, Op, Var};
pub use params::{ParamId, ParameterStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output of shape {shape:?}")]
    NonFinite { op: &'static str, shape: Vec<usize> },
    #[error("backward already ran on this graph; reset before sweeping again")]
    BackwardTwice,
    #[error("optimizer step requested but no gradients were accumulated")]
    NoGradients,
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
}
