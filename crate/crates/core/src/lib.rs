//! Accuracy and energy simulator for neural-network inference executed on
//! analog in-memory matrix-vector-multiply arrays.
//!
//! The simulator models, at the resolution of individual analog MACs:
//!
//! - weight-to-conductance mapping schemes (offset subtraction and
//!   differential cells, with and without weight bit slicing),
//! - stochastic cell programming errors (state-independent,
//!   state-proportional, and measured state-dependent curves),
//! - ADC quantization with range calibration from collected output
//!   statistics,
//! - bit-line parasitic resistance via nodal analysis of the resistor
//!   ladder,
//! - and an op-count energy model.
//!
//! All analog math is generic over the scalar type ([`Real`], `f32` or
//! `f64`); [`DefaultReal`] is what the CLI uses unless configured otherwise.

pub mod adc;
pub mod analysis;
pub mod devices;
pub mod error;
pub mod harness;
pub mod mapping;
pub mod netio;
pub mod pipeline;
pub mod scalar;
pub mod xbar;

pub use error::{Error, Result};
pub use scalar::Real;

/// Scalar type used by the CLI when the config does not pick one.
pub type DefaultReal = f64;
