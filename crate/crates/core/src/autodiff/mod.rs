//! Dense double-precision tensors with a reverse-mode gradient tape.
//!
//! Only the operations needed by the graph models and the contrastive objectives are
//! provided. Every operation records its own backward rule; the tape is rebuilt for
//! each forward pass and discarded by [`Tape::backward`].

mod adam;
mod sparse;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::logsumexp;
