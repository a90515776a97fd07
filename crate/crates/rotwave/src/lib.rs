//! Rotating waves in a square lattice of Lambda-Omega oscillators.
//!
//! The crate computes the one-armed rotating wave of the nearest-neighbour
//! lattice system `ż = α Σ (z′ − z) + z[λ(|z|) + iω(|z|, α)]` by reducing it to
//! a quarter-turn wedge, solving the uncoupled phase pattern, continuing in
//! the coupling `α`, and checking the result against a direct simulation of
//! the full lattice. The linearisation at `α = 0` is assembled explicitly for
//! operator diagnostics.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod continuation;
pub mod diagnostics;

pub mod error;
pub mod graph;
pub mod lattice;
pub mod linalg;
pub mod model;
pub mod phase;
pub mod wave;


pub use error::{Error, Result};
