//! Files: tensor containers, run configuration and CSV exports.

pub mod container;
pub mod config;
pub mod dataset;
pub mod export;
