//! Adversarial-robustness toolkit for small semantic-segmentation networks.
//!
//! The crate bundles a minimal reverse-mode autodiff engine, desk-scale
//! U-Net / LinkNet builders, PGD-family attacks, adversarial training,
//! representation-matching dataset robustification, a procedural off-road
//! scene generator and segmentation metrics.

pub mod attacks;
pub mod autodiff;
pub mod baseline;
pub mod data;
pub mod error;
pub mod exec;
pub mod fsutil;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod robustify;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
