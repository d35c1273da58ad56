//! Geometric distortion correction for gradient-echo EPI.
//!
//! A U-Net estimates a displacement map along the phase-encoding axis from a
//! distorted EPI image and a T1-weighted reference. The map is applied by a
//! differentiable pull-warp so the whole chain can be trained with supervised,
//! semi-supervised or self-supervised objectives.
//!
//! Modules:
//! - [`autodiff`]: dense tensors and a tape-based reverse-mode engine.
//! - [`unet`]: the displacement estimator and its weights file format.
//! - [`distortion`]: field map to displacement conversion, warping, phantoms.
//! - [`losses`]: MSE, local cross-correlation and smoothness objectives.
//! - [`trainer`]: Adam, the training loop, regularization sweeps, inference.
//! - [`metrics`]: NMI / SSIM / PSNR and the group comparison statistics.
//! - [`pipeline`]: NIfTI-1 I/O, preprocessing, job configuration, CLI commands.

pub mod autodiff;
pub mod distortion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
