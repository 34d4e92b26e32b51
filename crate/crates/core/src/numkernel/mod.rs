//! Dense linear algebra, reverse-mode differentiation and seeded randomness.

mod ops;
mod rng;
mod tape;
mod tensor;

pub mod gradcheck;

pub use ops::{cosine_sim, kl_div, mse, softmax, KL_CLAMP, NORM_EPS};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{dot, norm, Embedding, Tensor2, Vector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("vector norm is below {NORM_EPS}")]
    ZeroNormVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NotScalar { shape: (usize, usize) },
}
