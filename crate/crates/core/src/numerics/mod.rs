//! Tensor type, differentiable primitives, and the reverse-mode tape.

pub mod activation;
mod array;
mod gradcheck;
pub mod ops;
mod params;
mod scalar;
mod tape;

pub use activation::Activation;
pub use array::{expect_shape, gemm, NdArray};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport};
pub use params::{ParamEntry, ParamStore};
pub use scalar::Scalar;
pub use tape::{CustomOp, Grads, Tape, Var};
