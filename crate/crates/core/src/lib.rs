//! Attention-similarity knowledge distillation for low-resolution face
//! recognition: an HR teacher's CBAM attention maps are transferred to an LR
//! student through a cosine-distance loss.

pub mod analysis;
pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod degrade;
pub mod error;
pub mod evaluate;
pub mod losses;
pub mod plot;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
