//! Numerics core for a multichannel-attention ensemble CNN: a small
//! reverse-mode autodiff engine, image preprocessing and synthetic data,
//! the two-branch model with channel attention, and a deterministic
//! training harness.

pub mod config;
pub mod error;
pub mod image;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
