//! Dense `f64` tensors and a reverse-mode automatic-differentiation tape.
//!
//! Values live on a [`Tape`]; every op appends a node holding its output and
//! whatever it needs for the backward rule. [`Tape::backward`] sweeps the
//! nodes in reverse and leaves gradients readable through [`Tape::grad`].
//! [`gradcheck`] compares those gradients against central differences.

mod error;
pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckReport};
pub use ops::elementwise::softplus;
pub use ops::norm::LAYER_NORM_EPS;
pub use ops::reduce::pair_softmax_values;
pub use tape::{PconvScaling, Tape, Var};
pub use tensor::Tensor;
