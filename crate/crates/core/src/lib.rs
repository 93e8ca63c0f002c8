//! Semi-supervised multimodal image synthesis with difficulty-weighted
//! losses and teacher → student distillation, on procedural phantoms.
//!
//! The crate is organised along the training pipeline:
//! [`phantom_data`] builds datasets, [`nets`] holds the generator,
//! discriminator and projection heads, [`difficulty`] derives per-pixel loss
//! weights from discriminator scores, [`losses`] defines every objective,
//! [`trainer`] runs the two-stage schedule and [`eval`] scores the result.

pub mod difficulty;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod phantom_data;
pub mod trainer;

pub use error::{Error, Result};
