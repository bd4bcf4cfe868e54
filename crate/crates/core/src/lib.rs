//! Knowledge distillation for lightweight time-series forecasters.
//!
//! This crate trains a channel-independent decomposition-MLP student against a
//! frozen teacher by matching behaviour in two complementary views of a series:
//!
//! - **multi-scale**: stride-2 downsampling pyramids of predictions and
//!   internal features, matched with per-level mean squared error,
//! - **multi-period**: temperature-softmax distributions over DC-removed DFT
//!   amplitude spectra, matched with KL divergence.
//!
//! The crate also ships the surrounding machinery: dataset loading and
//! windowing ([`dataio`]), the student forecaster with analytic gradients
//! ([`student`]), teacher sources and on-disk teacher artifacts ([`teacher`]),
//! the combined training objective ([`distill`]), an Adam training loop with
//! early stopping plus executable verifiers for the mixup-bound inequalities
//! ([`trainer`]), and metrics / diagnostic exports ([`eval`]).
//!
//! All numeric kernels are generic over the scalar type through [`Scalar`];
//! training and verification run at `f64` (see [`Real`]).

pub mod dataio;
pub mod distill;
pub mod error;
pub mod eval;
pub mod multiscale;
pub mod spectral;
pub mod student;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};

/// Floating-point scalar the numeric kernels are generic over.
///
/// Implemented for `f32` and `f64`. Seeded generators draw in `f64` and cast,
/// so a fixed seed produces the same sequence of values for every scalar type.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: num_traits::Float
        + num_traits::FromPrimitive
        + num_traits::NumAssignOps
        + ndarray::ScalarOperand
        + std::iter::Sum
        + std::fmt::Debug
        + std::fmt::Display
        + Send
        + Sync
        + 'static
{
}

/// Default precision used by the CLI, the trainer, and all verifiers.
pub type Real = f64;

/// Shorthand for casting an `f64` literal into the working scalar type.
pub(crate) fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}
