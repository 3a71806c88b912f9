//! Synthetic benchmark, baselines, training, evaluation and ablations.

pub mod ablation;
pub mod baseline;
pub mod task;
pub mod evaluate;
pub mod train;
