//! Consistency and contrastive training losses with analytic gradients.
//!
//! Everything is `f64`. Gradients are checked against central finite
//! differences by [`gradcheck`].

use thiserror::Error;

pub mod gradcheck;
mod loss;
mod matrix;

pub use loss::{
    ar_cross_entropy, consistency_loss, contrastive_loss, cosine_sim, cosine_sim_grad, info_nce,
    log_sum_exp, mean_pool, mean_pool_backward, softmax, total_loss, InfoNceOutput, LossInput,
    LossOutput, VariantInput, DEFAULT_TEMPERATURE,
};
pub use matrix::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("target id {id} at position {position} is outside vocabulary of {vocab}")]
    TargetOutOfRange {
        position: usize,
        id: usize,
        vocab: usize,
    },
    #[error("empty sequence")]
    EmptySequence,
    #[error("vector norm is zero; direction undefined")]
    ZeroNorm,
    #[error("contrastive loss needs at least one positive")]
    NoPositives,
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("loss input has no original variant")]
    MissingOriginal,
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    Epsilon(f64),
}
