//! Data preparation, synthetic scenes, peak extraction and evaluation for
//! point-based animal counting on large aerial images.
//!
//! Everything in this crate is model-free: the network, training loops and
//! full-image inference live in `herdcount-model`.

pub mod dataset;
pub mod detect;
pub mod error;
pub mod eval;
pub mod geo;
pub mod raster;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
