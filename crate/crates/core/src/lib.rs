//! Desk-scale multimodal late-fusion training toolkit.
//!
//! Implements negative learning between modalities (a robust dominant
//! modality guides weaker ones to suppress non-target classes), plus a
//! certification layer that lower-bounds the fused classifier's robustness
//! radius from per-modality confidence margins and Lipschitz constants.

pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod guidance;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod robustness;
pub mod trainer;

pub use error::{Error, Result};
