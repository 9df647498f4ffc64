//! Dense `f64` tensors, reverse-mode autodiff, and the finite-difference oracle.

mod gradcheck;
mod io;
pub mod kernels;
mod tape;

mod optim;
mod params;

mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport, ABS_FLOOR};
pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor, TENSOR_MAGIC};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, GradAccum, ParamId, ParamStore};
pub use tape::{softplus, Gradients, PairRotation, Tape, Var};
pub use tensor::Tensor;
