//! Density-and-depth crowd counting with pixel-wise adversarial tamper detection.
//!
//! A shared encoder feeds two decoders, one regressing people density and one
//! regressing scene depth. Perturbations crafted against the density stream
//! disturb the depth stream as well, so the relative error between estimated
//! depth and a trusted reference depth flags tampered pixels.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, dataset layout
//! and the command line live in the companion `dad` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attack;
pub mod baselines;
pub mod defense;
mod error;
pub mod grid;
mod math;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
pub use grid::{Image, Map, MaskProvenance, Shape, TamperMask};
