//! Dense tensor arithmetic with reverse-mode automatic differentiation.

mod tape;
mod tensor;

pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;

#[cfg(test)]
mod tests;
