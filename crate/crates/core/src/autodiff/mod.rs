//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`] as they are computed; learnable tensors live in
//! a [`ParamStore`] and are bound onto a tape per forward pass. Calling
//! [`Tape::backward`] on a scalar accumulates gradients into the store.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::Adam;
pub use params::{Checkpoint, CheckpointEntry, ParamId, ParamStore, Parameter, CHECKPOINT_FORMAT_VERSION};
pub use tape::{sigmoid, softmax_values, OpKind, Tape, Var};
pub use tensor::Tensor;
