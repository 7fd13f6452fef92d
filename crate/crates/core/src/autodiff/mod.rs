//! Dense `f64` tensors with define-by-run reverse-mode differentiation.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod nn;
mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use optim::{AdamConfig, AdamState};
pub use params::{Bound, ParamStore};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
