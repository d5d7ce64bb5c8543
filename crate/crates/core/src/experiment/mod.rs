//! Experiment configuration, checkpoints and multi-seed aggregation.

mod checkpoint;
mod config;
mod matrix;

pub use checkpoint::*;
pub use config::*;
pub use matrix::*;
