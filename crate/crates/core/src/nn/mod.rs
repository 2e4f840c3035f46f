//! Dense `f64` matrices, a reverse-mode autodiff tape, Adam and checkpoints.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, Var};
pub use params::{Checkpoint, Gradients, NamedTensor, ParamId, ParamStore, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tensor::Tensor;
