//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor) values.

pub mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport};
pub use ops::RMS_EPS;
pub(crate) use ops::{softmax_rows, softmax_rows_backward};
pub use tape::{BackwardArgs, BackwardFn, CheckpointFn, Gradients, Tape, Var};
