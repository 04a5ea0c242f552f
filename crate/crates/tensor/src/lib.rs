//! Minimal CPU tensor library with reverse-mode automatic differentiation.
//!
//! Backward rules are themselves expressed as recorded tensor operations, so
//! gradients can be differentiated again (`create_graph = true`). That is what
//! the gradient penalty of a Wasserstein critic needs: a loss on the norm of an
//! input gradient, optimized with respect to the critic's parameters.

mod autograd;
mod conv;
mod error;
mod linalg;
mod ops;
pub mod optim;
mod scalar;
mod tensor;

pub use autograd::{grad, grad_with_seed};
pub use conv::conv_out_size;
pub use error::{Result, TensorError};
pub use ops::broadcast_shapes;
pub use optim::{Adam, AdamConfig};
pub use scalar::{DType, Scalar};
pub use tensor::{enable_grad, is_grad_enabled, no_grad, Tensor};
