//! Desk-scale exercise rig for the boundary-aware training signals:
//! synthetic misaligned scenes, a small patch model with manual backprop,
//! the full training loop, a finite-difference gradient checker, and the
//! strategy comparison runs.

pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod train;

pub use error::{HarnessError, Result};
