//! Dense tensors, reverse-mode differentiation, and a finite-difference oracle.

mod finite_diff;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff, relative_error};
pub use tape::{Gradients, Tape, Var, PRIMITIVES};
pub(crate) use tensor::log_softmax_slice;
pub use tensor::{softmax, Tensor};
