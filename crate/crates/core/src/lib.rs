//! Face quality assessment toolkit: augmentation-driven quality labels,
//! a landmark network with a single trainable quality node, attack-based
//! evaluation and an edge pipeline simulator.

pub mod archive;
pub mod augmentation;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod monet;
pub mod pipeline;
pub mod recognition;
pub mod seed;
pub mod synth;

pub use error::{FqaError, Result};
