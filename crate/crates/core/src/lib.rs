//! Mixup-based self-knowledge distillation at desk scale.
//!
//! A staged CNN is trained together with auxiliary branches, a self-teacher
//! over the fused stage features and per-stage feature discriminators, all
//! supervised through Mixup pairs. Only the backbone survives into the
//! inference network.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod parallel;
pub mod trainer;

pub use error::{Error, Result};
pub mod mixup;
pub mod network;

#[cfg(test)]
pub(crate) mod testutil;
