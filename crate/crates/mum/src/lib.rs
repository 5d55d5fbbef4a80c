//! Multi-view masked image modeling at desk scale.
//!
//! The crate implements a self-supervised pretraining objective that
//! reconstructs uniformly masked views of a scene, the encoder plus
//! multi-view decoder that optimizes it, the data sampling recipe, and a
//! linear-probe dense-matching evaluation stack. Everything runs on a small
//! deterministic f64 substrate so gradients, invariants, and metrics can be
//! verified exactly on one CPU core.

pub mod cli;
pub mod error;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod train;

pub use error::{MumError, Result};
