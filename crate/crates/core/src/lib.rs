//! Deterministic CPU pipeline for panoramic segmentation.
//!
//! The crate builds up from a dense f64 autodiff kernel ([`tensor`]) to a
//! multi-resolution segmentation network with position/channel attention and
//! object-context refinement ([`model`]), the weighted multi-head loss
//! ([`loss`]), mosaic and scale augmentation ([`augment`]), confusion-matrix
//! scoring ([`metrics`]), multi-scale fused inference ([`inference`]) and a
//! teacher-student self-training loop ([`selftrain`]). Everything is seeded:
//! a whole run is a pure function of its inputs, configuration and seed.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
