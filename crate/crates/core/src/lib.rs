//! Distance guided channel weighting (DGCW) for semantic segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense row-major tensors, a recorded computation graph with
//!   reverse-mode differentiation, finite-difference gradient checking and
//!   the `DGT1` binary tensor format.
//! - [`layers`]: parameterised building blocks (1x1 and dilated 3x3
//!   convolutions, batch normalization, pooling, bilinear resampling,
//!   cross entropy) plus checkpoint archives.
//! - [`dgcw`]: the channel-weighting context module with a naive reference
//!   implementation and a memory-fused kernel.
//! - [`baselines`]: comparison context modules and the shared context
//!   operator skeleton.
//! - [`network`]: backbone, PPM/ASPP heads and the full segmentation net.
//! - [`training`]: SGD with poly schedule, OHEM, augmentation and the
//!   procedural synthetic dataset.
//! - [`metrics`]: confusion matrices, mIoU, multi-scale/flip inference and
//!   class-wise feature variance diagnostics.

pub mod baselines;
pub mod dgcw;
mod error;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

/// Scalar type used by every tensor. Selected at build time: 64-bit by
/// default, 32-bit with the `f32` feature.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Human-readable name of the compiled scalar precision.
pub const PRECISION: &str = if cfg!(feature = "f32") { "f32" } else { "f64" };

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u32 = 255;
