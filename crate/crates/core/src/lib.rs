//! Night-time semantic segmentation by cross-domain correlation distillation.

pub mod ablation;
pub mod checkpoint;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod nn;
pub mod objective;
pub mod segnet;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
