//! Trains the full model on a reduced synthetic task and prints the
//! per-epoch log and the per-family test accuracy.
//!
//! ```text
//! cargo run --release --example train_synthetic [epochs]
//! ```

use avqa::harness::baseline::PoolingStrategy;
use avqa::harness::evaluate::evaluate;
use avqa::harness::task::{generate_task, TaskConfig};
use avqa::harness::train::{train_with_progress, TrainConfig};
use avqa::numerics::AdamConfig;
use avqa::{Model, ModelConfig, ModelOptions};

fn main() -> avqa::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let task = TaskConfig {
        segments: 48,
        width: 32,
        heads: 4,
        train_size: 600,
        val_size: 100,
        test_size: 200,
        ..TaskConfig::default()
    };
    let data = generate_task(&task)?;
    let config = ModelConfig::for_task(&task, true, PoolingStrategy::GaussianExperts(task.experts), &ModelOptions::default());
    let mut model = Model::<f32>::new(config, 0)?;
    let train = TrainConfig {
        epochs,
        adam: AdamConfig {
            lr: 2e-3,
            decay_every: 0,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    train_with_progress(&mut model, &data.train, &data.val, &train, |e| {
        println!(
            "epoch {:>2}  loss {:.4}  train {:.3}  val {:.3}",
            e.epoch,
            e.train_loss,
            e.train_accuracy,
            e.val_accuracy.unwrap_or(f64::NAN)
        );
    })?;
    println!("{}", evaluate(&model, &data.test)?);
    Ok(())
}
