//! Dense tensors and reverse-mode differentiation.

mod backend;
mod scalar;
mod tape;
mod tensor;

pub use backend::{Backend, Eager};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine, log_sum_exp, softmax, Tensor};
