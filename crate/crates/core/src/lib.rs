//! Transformer-CNN cohort for semi-supervised semantic segmentation.
//!
//! A small convolutional student and a small patch-attention student are
//! trained together: Dice supervision on labeled images, bidirectional KL
//! distillation between their predictions, and a class-aware feature
//! consistency term built from prototype similarity maps.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod ops;
pub mod params;
pub mod plot;
pub mod prototype;
pub mod seed;
pub mod students;
pub mod train;

pub use error::{Result, TccError};
