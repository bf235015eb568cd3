//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! The tape is rebuilt for every optimization step. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and the
//! backward pass is a single reverse sweep.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub(crate) use tensor::argmax;
pub use tensor::Tensor;
