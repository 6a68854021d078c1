//! Tensors, the reverse-mode tape, momentum SGD and the gradient checker.

pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, check_gradients_on, relative_error, GradCheck};
pub use kernels::{conv2d, matmul, softmax, transpose};
pub use ops::{concat, stack, Tap};
pub use optim::{SgdState, StepDecay};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
