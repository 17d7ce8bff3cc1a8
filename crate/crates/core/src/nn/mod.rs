//! Minimal differentiable tensor stack: stride-1 same-padding convolution and
//! transposed convolution, ReLU, elementwise add and subtract, squared-difference
//! reductions, reverse-mode gradients, Adam and a finite-difference checker.

mod adam;
pub mod conv;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv2d, tconv2d, ConvLayerSpec, ConvShape};
pub use gradcheck::{check_gradients, relative_error, GradCheckFailure, GradCheckOptions, GradCheckReport, REL_FLOOR};
pub use graph::{Graph, Var};
pub use tensor::Tensor4;
