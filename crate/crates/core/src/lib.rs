//! Dual-branch RGB-T tracking with cross-branch fusion.

pub mod ablation;
pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod crop;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod head;
pub mod kv;
pub mod loss;
pub mod model;
pub mod plot;
pub mod tracking;
pub mod train;
pub mod nn;
pub mod synth;
pub mod verify;

pub use bbox::BBox;
pub use config::{HeadInput, ModelConfig};
pub use error::{CfbtError, Result};
pub use model::{CfbtModel, FreezePolicy};
