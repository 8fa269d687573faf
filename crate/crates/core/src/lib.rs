//! Retrieval-augmented image harmonization toolkit.
//!
//! Images are indexed by per-patch content and appearance descriptors,
//! composites retrieve references with matching content and illumination,
//! and a guided attention kernel drives a statistical color transfer.

pub mod augment;
pub mod config;
pub mod error;
pub mod features;
pub mod harmonize;
pub mod imageio;
pub mod metrics;
pub mod pipeline;
pub mod raif;
pub mod retrieval;
pub mod sgf;

pub use error::{Error, Result};
pub use imageio::{CompositeSample, ForegroundMask, Image};
