//! Label noise, spurious correlations and invariance-learning objectives on
//! overparameterized linear classifiers.
//!
//! - [`datagen`]: blocked Gaussian features with invariant, spurious and
//!   nuisance parts, label noise and random rotations.
//! - [`model`]: the bias-free linear classifier and logistic loss.
//! - [`objectives`]: ERM, IRMv1, V-REx, GroupDRO and Mixup in logit space.
//! - [`trainer`]: full-batch gradient descent with block masks.
//! - [`analysis`]: norm decompositions, memorization cost, the norm-gap
//!   condition, closed-form risks and a max-margin oracle.
//! - [`experiments`]: configuration-driven sweeps writing CSV and JSON.

extern crate blas_src;

pub mod analysis;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod model;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
