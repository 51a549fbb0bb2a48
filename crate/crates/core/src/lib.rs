//! Predictive uncertainty for softmax classifiers from a Laplace
//! approximation over the trailing layers of a multilayer perceptron.
//!
//! The pipeline is: train a MAP network ([`train`]), accumulate the
//! trailing-layer posterior covariance ([`posterior`]), propagate it to the
//! logits and marginalize the softmax by sampling ([`predict`]), then fuse
//! ([`fusion`]) or score ([`calibration`]) the resulting PMFs.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod artifact;
pub mod calibration;
pub mod data;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod nn;
pub mod posterior;
pub mod predict;
pub mod train;

pub use error::{Error, Result};
pub use nn::{Activation, LayerSpec, Mlp, Pmf, TrailingSubset};
pub use posterior::PosteriorCovariance;
pub use predict::{LogitGaussian, PmfEstimate};
