//! Adversarial evasion patches for real-time object detectors.
//!
//! The toolkit optimizes square image patches that suppress detections when
//! placed over objects of interest, measures how well those patches transfer
//! across detector architectures (relative mAP drop, compatibility matrices),
//! and provides forensic analysis of patch corpora (feature-space t-SNE,
//! channel histogram statistics).
//!
//! Everything runs at desk scale against the built-in differentiable toy
//! detector; real detector families plug in through the adapter registry.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod analysis;
pub mod config;
pub mod detectors;
pub mod error;
pub mod evaldata;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod optimize;
pub mod patch;
pub mod report;

pub use error::{Error, Result};

/// H x W x 3 image with real-valued intensities, nominally in [0, 1].
pub type Image = ndarray::Array3<f64>;
