//! Dense fp64 tensors and a reverse-mode gradient tape.

mod tape;
mod value;

pub use tape::{Gradients, Tape, Var, CORRELATION_EPS};
pub use value::Tensor;
