//! Implicit polynomial carriers for sentence-embedding clouds: PCA
//! reduction, algebraic surface fitting, on-surface sampling, validity
//! metrics, and a downstream augmentation harness.

#![no_std]

extern crate alloc;

pub mod cloud;
pub mod corpus;
pub mod downstream;
pub mod error;
pub mod knn;
pub mod math;
pub mod probe;
pub mod reduce;
pub mod rng;
pub mod surface;
pub mod validity;

pub use error::{Error, Result};
