//! Writes a dataset and a model checkpoint to tensor containers, reads
//! them back and checks that nothing changed.
//!
//! ```text
//! cargo run --release --example container_roundtrip [dir]
//! ```

use std::path::PathBuf;

use avqa::harness::ablation::Precision;
use avqa::harness::baseline::PoolingStrategy;
use avqa::harness::task::{generate_task, TaskConfig};
use avqa::io::container::{read_container, write_container};
use avqa::io::dataset::{read_dataset, write_dataset};
use avqa::{Model, ModelConfig, ModelOptions};

fn main() -> avqa::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into()));
    let task = TaskConfig::tiny();
    let data = generate_task(&task)?;

    let data_path = dir.join("tiny_data.qtgf");
    write_dataset(&data_path, &data, Precision::F64)?;
    let back = read_dataset(&data_path)?;
    let same = back.config == data.config
        && back.train.iter().zip(&data.train).all(|(a, b)| a.label == b.label && a.inputs == b.inputs);
    println!("{}: {} train samples, identical: {same}", data_path.display(), back.train.len());

    let config = ModelConfig::for_task(&task, true, PoolingStrategy::GaussianExperts(task.experts), &ModelOptions::default());
    let mut model = Model::<f32>::new(config.clone(), 3)?;
    let ckpt = dir.join("tiny_model.qtgf");
    write_container(&ckpt, &model.checkpoint())?;
    let records = read_container(&ckpt)?;
    println!("{}: {} tensors, identical: {}", ckpt.display(), records.len(), records == model.checkpoint());

    // a model with different initial weights takes the stored ones over
    let mut other = Model::<f32>::new(config, 4)?;
    other.load_checkpoint(&records)?;
    model.load_checkpoint(&other.checkpoint())?;
    println!("reloaded model matches: {}", model.checkpoint() == records);
    Ok(())
}
