//! Conditional denoising-diffusion surrogate for 2-D smoke flow.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff
//! library ([`tensor`]), a MAC-grid smoke solver that generates data
//! ([`fluid`]), the diffusion chain ([`ddpm`]), the conditional U-Net
//! denoiser ([`unet`]), the Adam training loop ([`train`]), dataset and
//! tensor-file persistence ([`dataset`], [`fdt`]), conditional prediction
//! ([`predict`]) and evaluation metrics ([`metrics`]).

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod ddpm;
pub mod error;
pub mod fdt;
pub mod fluid;
pub mod metrics;
pub mod predict;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{DiffusionError, FluidError, IoError, MetricsError, ModelError, TensorError, TrainError};
pub use tensor::{DType, Real, Tape, Tensor, Var};
