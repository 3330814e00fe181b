//! Dual-branch in-context segmentation network with hand-written backprop.

pub mod ops;
pub mod checkpoint;
mod conv;
pub mod model;
pub mod tensor;

pub use tensor::Tensor;
pub use model::{Fusion, LossAndGrad, ModelConfig, ModelState, ParamTensor, Params, Prediction, DEFAULT_THRESHOLD};
