//! Evidential uncertainty and trustworthy decision fusion for multi-modal
//! segmentation.
//!
//! The crate is `no_std` (it needs `alloc`) and does no IO. It covers:
//!
//! * [`tensor`], [`autodiff`], [`special`], [`gradcheck`]: dense tensors, a
//!   reverse-mode tape, digamma / log-gamma, and finite-difference checks.
//! * [`opinion`]: evidence, Dirichlet parameters and subjective-logic opinions.
//! * [`fusion`]: Dempster's combination of opinions, scalar and per pixel.
//! * [`losses`]: the evidential segmentation loss suite.
//! * [`cfl`], [`dfc`]: loss combinators and forward blocks of the feature
//!   learning and feature calibration stages.
//! * [`metrics`]: DSC, Jaccard, HD95, sensitivity and precision.
//! * [`synth`]: a seeded bimodal phantom generator and the perturbation
//!   protocols.
//! * [`pipeline`]: a small per-pixel evidential segmenter with decision fusion.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod cfl;
pub mod dfc;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
mod math;
pub mod metrics;
pub mod opinion;
pub mod pipeline;
pub mod rng;
pub mod special;
pub mod synth;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use fusion::{combine, fuse_all, fuse_maps, joint_result, FusionError, FusionResult};
pub use opinion::{DirichletParams, Evidence, Opinion, OpinionError, OpinionMap};
pub use tensor::{Tensor, TensorError};
