//! Change-detection building blocks on a small reverse-mode tensor engine.
//!
//! * [`ops`], [`autograd`], [`gradcheck`]: dense `f64` tensors, differentiable
//!   kernels and a finite-difference checker.
//! * [`gndd`]: Gaussian noise domain disturbance and its training scheduler.
//! * [`dfc`]: detail feature compensation (detail branch times two chained
//!   criss-cross attention passes).
//! * [`fdf`]: histogram mutual information, the MI difference loss and the
//!   channel/spatial gating block.
//! * [`metrics`]: confusion counts and OA / IoU / F1 / recall / precision.
//! * [`synth`]: synthetic bi-temporal pairs with planted changes and domain shifts.
//! * [`model`], [`train`], [`ablate`]: the siamese pipeline, its training loop
//!   and the component ablation matrix.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablate;
pub mod autograd;
pub mod config;
pub mod dfc;
pub mod error;
pub mod fdf;
pub mod gndd;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Dims, Tensor};
