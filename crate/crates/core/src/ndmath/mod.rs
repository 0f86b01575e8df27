//! Dense double-precision tensors, reverse-mode autodiff with second-order
//! support, fully connected networks and the Adam optimizer.

mod adam;
mod graph;
mod mlp;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::softplus;
pub use mlp::{Activation, Layer, LayerDocument, MlpDocument, MlpParams, MlpVars, MLP_FORMAT, MLP_FORMAT_VERSION};
pub use tensor::Tensor;
