//! Dense tensors, a recording tape for reverse-mode gradients, and Adam.

mod adam;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{CosineForm, Pool, Tape, Var};
pub use tensor::Tensor;
