//! Dense tensors, a reverse-mode tape, and the finite-difference oracle.

pub mod functional;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use functional::{gelu, layer_norm, log_sum_exp, softmax};
pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_FD_STEP};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine, dot, norm, Tensor};
