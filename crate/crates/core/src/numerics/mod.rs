//! Tensors, reverse-mode differentiation, Adam and checkpoint I/O.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{softmax, Tensor};

#[cfg(test)]
pub(crate) use tape::log_sigmoid;
pub(crate) use tape::{centre, sigmoid};
