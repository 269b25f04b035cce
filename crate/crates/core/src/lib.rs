//! Watermarking toolkit for grid-based radiance fields.
//!
//! The pipeline embeds an `N_b`-slot binary signature into the finest grid
//! level of a small voxel radiance field by adding a learned codebook
//! combination to the grid, trains a CNN extractor to read the signature back
//! from rendered patches at a secret key (camera pose + patch lattice
//! selection), and verifies ownership by thresholded bit accuracy. Attack
//! tooling (image transforms, fine-tuning, projected gradient descent,
//! random-key probing) measures how hard the mark is to remove or forge.

pub mod attacks;
pub mod caks;
pub mod codebook;
pub mod container;
pub mod distortion;
pub mod error;
pub mod extractor;
pub mod field;
pub mod numerics;
pub mod renderer;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
