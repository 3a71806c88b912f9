//! Question-guided audio-visual answering with Gaussian temporal experts.
//!
//! The crate is organised bottom-up: [`numerics`] holds tensors, reverse-mode
//! differentiation and the optimizer; [`attention`], [`fusion`], [`experts`]
//! and [`reasoning`] are the model stages; [`model`] assembles them;
//! [`harness`] generates the synthetic benchmark and runs training,
//! evaluation and ablations; [`io`] reads and writes checkpoints, configs and
//! CSV tables.

pub mod attention;
pub mod cli;
pub mod error;
pub mod experts;
pub mod fusion;
pub mod harness;
pub mod io;
pub mod model;
pub mod numerics;
pub mod params;
pub mod reasoning;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelOptions};
