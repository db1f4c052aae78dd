//! Reverse-mode differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays them in reverse and returns gradients for every trainable leaf.
//! Two mechanisms exist beyond ordinary chain-rule ops:
//!
//! * [`Tape::inject_gradient`] turns an externally supplied residual into a
//!   pseudo-loss whose gradient is `residualᵀ · ∂output/∂Θ`. Guidance
//!   gradients have no scalar objective, so this is how they enter.
//! * [`Tape::straight_through`] emits a hard forward value while routing
//!   gradients through a soft surrogate.
//!
//! Extension kernels (hash-grid encoding, volume compositing) plug in
//! through [`CustomOp`].

mod kernels;
mod tape;
mod tensor;

pub mod gradcheck;

pub use kernels::{log_sigmoid, sigmoid, softplus};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("tape was already consumed by a backward pass")]
    TapeConsumed,
}
