//! Mixed-precision training with software-emulated IEEE binary16.
//!
//! The crate keeps an FP32 master copy of every weight, feeds an FP16
//! shadow of it through forward and backward passes, scales the loss so
//! small gradients survive FP16 storage, and accumulates FP16 products in
//! FP32. All binary16 semantics come from [`binary16::Half`], so the
//! numerics are bit-reproducible on any host.
//!
//! Module map:
//!
//! * [`binary16`] - conversion, classification and arithmetic on [`Half`]
//! * [`tensor`] - dense F16/F32 tensors, casts and precision-selectable matmul
//! * [`nn`] - layers with forward/backward passes and a gradient checker
//! * [`engine`] - master weights, loss scaling, overflow skipping, SGD
//! * [`diagnostics`] - gradient exponent histograms and underflow reports
//! * [`harness`] - datasets, run configs, ablation runs, CSV and SVG output

pub mod binary16;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod harness;
pub mod nn;
pub mod tensor;

pub use binary16::{h_add, h_mul, Class, Half};
pub use error::{Error, Result};
pub use tensor::{AccumMode, DType, Tensor};
