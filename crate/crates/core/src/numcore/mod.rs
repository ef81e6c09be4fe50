//! Dense tensors with a tape-based reverse-mode differentiator.
//!
//! Values are recorded on a [`Tape`] as operations execute; [`Tape::backward`]
//! replays the tape in reverse and accumulates gradients into the
//! trainable tensors held by a [`ParamStore`]. Every public operation checks
//! its output for NaN/Inf and reports it as [`TensorError::NonFinite`].

pub mod gradcheck;
mod gemm;
mod ops;
mod optim;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use thiserror::Error;

pub use optim::{sgd_step, ParamId, ParamStore, Sgd};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// Converts an `f64` literal into this precision.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = a * b + beta * c` on strided row/column-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch in {dim}: {detail}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        detail: String,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub fn shape_err(op: &'static str, dim: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        dim,
        detail: detail.into(),
    }
}
