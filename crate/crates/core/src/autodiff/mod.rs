//! Minimal reverse-mode automatic differentiation.
//!
//! Exactly the primitives the agents need (affine maps, valid 1-D
//! convolution, sigmoid, log-softmax, dot product, negative log-likelihood)
//! plus a Gumbel-softmax relaxed sampler. A [`Tape`] is built per episode and
//! thrown away afterwards.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, max_relative_error, relative_error, GradCheck};
pub use tape::{log_softmax, sample_gumbel, sigmoid, softmax, Tape, Var};
pub use tensor::{argmax, Tensor};
