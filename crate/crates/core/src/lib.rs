//! Semi-supervised semantic segmentation with a mean-teacher scheme,
//! pseudo-labels, entropy minimisation and a positive-only pixel-level
//! contrastive loss against a class-wise memory bank of high-quality
//! labeled features.

pub mod augment;
pub mod bank;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
