//! Adversarial complementary learning for weakly supervised object
//! localization, at desk scale.
//!
//! A small CNN backbone feeds two classifier branches. Branch A's class map
//! marks the most discriminative region, which is erased from the shared
//! features before branch B sees them, so B learns to respond to the rest of
//! the object. The two normalized maps are fused by elementwise maximum and
//! turned into a bounding box.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod heatmap;
pub mod localization;
pub mod locmaps;
pub mod net;
pub mod ops;
pub mod parallel;
pub mod pngio;
pub mod synthdata;
pub mod tensor;
pub mod tensorfile;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
