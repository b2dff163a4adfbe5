//! Numerical substrate for the learning modules: tensors, layers with
//! hand-written backward passes, truncated SVD, Adam and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod layers;
mod scalar;
mod svd;
mod tensor;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use gradcheck::{grad_check, GradCheckReport, Objective};
pub use layers::{conv_out_dim, conv_transpose_out_dim, ConvGeom, Layer, Sequential, Tape};
pub use scalar::{gemm, Scalar};
pub use svd::{orthonormality_defect, truncated_svd, TruncatedSvd};
pub use tensor::{Gradients, Matrix, Param, ParamId, ParamStore, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("rank {k} exceeds min(rows, cols) = {max}")]
    RankTooLarge { k: usize, max: usize },
    #[error("SVD did not converge")]
    ConvergenceFailure,
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },
}
