//! f64 tensors, a reverse-mode tape, and the SGD optimizer. Everything the
//! trainers differentiate goes through this module, so a finite-difference
//! harness can validate the whole stack.

mod kernels;
mod sgd;
mod tape;
mod tensor;

pub use sgd::{cosine_lr, Param, Sgd};
pub use tape::{Gradients, SurrogateMode, Tape, ValueId};
pub use tensor::Tensor;

/// Tape-free sum pooling of an NCHW tensor, shared with the
/// representation module's spatial downsampler.
pub fn sum_pool_tensor(x: &Tensor, k: usize) -> crate::error::Result<Tensor> {
    kernels::sum_pool2_forward(x, k)
}
