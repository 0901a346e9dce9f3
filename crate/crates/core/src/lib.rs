//! Multi-modal attribute prompting on a small dual encoder.
//!
//! A toy CLIP-style pair of encoders is extended with textual attribute
//! prompt sets, learnable visual attribute prompts, a text-guided
//! cross-attention enhancer, and an entropic optimal-transport alignment
//! between the two attribute sets. Everything runs on the CPU in `f64`.

pub mod avae;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod ot;
pub mod text;
mod transformer;
pub mod vision;

pub use error::{Error, Result};
pub use transformer::BlockShape;
