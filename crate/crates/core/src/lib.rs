//! Noise-to-tracking multi-object tracker.
//!
//! Paired boxes from two adjacent frames are corrupted with noise and
//! refined by a denoiser into detections plus association scores, which a
//! Kalman-assisted tracker turns into identities. The crate ships oracle
//! denoisers driven by ground truth or detection files, a scene simulator,
//! CLEAR/IDF1 metrics and MOTChallenge I/O.

pub mod assignment;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod simulator;
pub mod tracker;

pub use error::{Error, Result};
pub use geometry::{BBox, PairedBox};
