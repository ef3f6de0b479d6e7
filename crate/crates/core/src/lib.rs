//! Online 4D Gaussian-splatting reconstruction at desk scale.
//!
//! The library provides a differentiable CPU splatting renderer, a scene
//! state split into a fixed base set and a variable densified set, dual
//! hash-grid deformation fields, and the three per-timestep optimization
//! stages (selective inheritance, dynamics-aware shift, error-guided
//! densification) that together form the streaming loop, plus a synthetic
//! multi-view scene generator used as the verification bed.
//!
//! All numerics are f64 internally; on-disk formats use f32 as documented
//! in `io`. The `parallel` feature (default on) routes the per-pixel and
//! per-Gaussian inner loops through rayon; with the feature disabled the
//! same loops run sequentially and produce bit-identical results.

pub mod config;
pub mod deform;
pub mod dynamics;
pub mod error;
pub mod gaussians;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod render;
pub mod report;
pub mod rng;
pub mod scenegen;
pub mod stages;

pub use error::CoreError;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CoreError>;
