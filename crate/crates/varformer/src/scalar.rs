//! Scalar abstraction: all graph math is generic over `f32` / `f64`.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

use ndarray::{Array2, ArrayView2, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point element type for tensors and the autodiff graph.
///
/// `gemm` routes through ndarray's matrixmultiply-backed `dot` for the
/// concrete types, which is what keeps CPU training affordable.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn gemm(a: ArrayView2<Self>, b: ArrayView2<Self>) -> Array2<Self>;

    /// Lossy conversion from an `f64` literal or intermediate.
    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 literal")
    }

    /// Widening conversion for metrics and diagnostics.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn gemm(a: ArrayView2<Self>, b: ArrayView2<Self>) -> Array2<Self> {
        a.dot(&b)
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn gemm(a: ArrayView2<Self>, b: ArrayView2<Self>) -> Array2<Self> {
        a.dot(&b)
    }
    fn as_f64(self) -> f64 {
        self
    }
}
