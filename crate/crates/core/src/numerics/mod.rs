//! Deterministic CPU numerics: a define-by-run reverse-mode tape over dense
//! row-major matrices, an Adam optimizer, finite-difference gradient
//! checking, and seeded randomness helpers.
//!
//! Everything downstream (rendering, the extractor CNN, training, attacks)
//! builds its forward pass out of the op set in [`tape`], so evaluation and
//! differentiation always share one code path.

pub mod adam;
pub mod gradcheck;
pub mod linalg;
pub mod ops_nn;
pub mod ops_render;
pub mod real;
pub mod rng;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use real::Real;
pub use tape::{Tape, Var};
