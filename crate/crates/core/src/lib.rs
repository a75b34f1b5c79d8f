//! Boundary-aware training signals for semantic segmentation.
//!
//! The library provides the full signal path for boundary-focused training
//! on (possibly misaligned) synthetic data:
//!
//! - [`tensor`] / [`npy`] / [`rng`] / [`config`]: dense arrays, NPY
//!   interchange, a fixed portable random stream, and run configuration.
//! - [`morphology`]: boundary bands from semantic masks, including the
//!   thin/medium/thick granularity decomposition at feature resolution.
//! - [`ube`]: entropy-adaptive boundary weighting for the cross-entropy
//!   loss, the alternative boundary strategies, and analytic logit
//!   gradients.
//! - [`gap`]: the (class x granularity) prototype bank with momentum
//!   updates, imbalance weights, and the weighted contrastive loss with
//!   analytic feature gradients.
//! - [`has`]: per-image hardness tracking and the decaying
//!   random-vs-hardness sampling policy.

pub mod config;
pub mod error;
pub mod gap;
pub mod has;
pub mod morphology;
pub mod npy;
pub mod rng;
pub mod tensor;

pub mod ube;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
