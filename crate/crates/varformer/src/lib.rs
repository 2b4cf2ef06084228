//! Multi-scale token-based image restoration: residual vector quantization,
//! next-scale autoregressive prediction, and a guided restoration network,
//! all on a small deterministic CPU autodiff engine.

pub mod degradations;
pub mod error;
pub mod graph;
pub mod msvq;
pub mod nn;
pub mod restorer;
pub mod scalar;
pub mod scale_probe;
pub mod var_transformer;

pub use error::{Result, VarError};

/// Scalar type used for training and inference.
pub type Real = f32;
/// Scalar type used for metrics and finite-difference checks.
pub type Precise = f64;
