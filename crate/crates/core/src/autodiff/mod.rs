//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every model layer is written in terms of the operations on [`Var`], so a
//! single finite-difference harness ([`gradcheck`]) covers the whole network.
//! Binary elementwise operations require identical shapes; the only implicit
//! broadcast is scalar-with-tensor (`scale`, `add_scalar`). Use `tile`,
//! `reshape` and `permute` to line operands up explicitly.

pub mod gradcheck;
mod kernels;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, grad_check, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;



use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("invalid shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called on an inference (frozen) tape")]
    FrozenTape,
    #[error("loss was recorded on a different tape")]
    ForeignTape,
    #[error("function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("{0}")]
    Precondition(String),
}
