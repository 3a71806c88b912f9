//! Parses a `key = value` run configuration, shows the derived model and
//! training settings, and prints the complete file it writes back.
//!
//! ```text
//! cargo run --example run_config
//! ```

use avqa::io::config::RunConfig;

const TEXT: &str = "\
# temporal questions only need a short clip
task.segments = 30
model.strategy = weighted_gaussian_disjoint:5
train.epochs = 3
train.lr = 0.001
seeds = 0,1
";

fn main() -> avqa::Result<()> {
    let cfg = RunConfig::parse(TEXT)?;
    let model = cfg.model_config();
    println!("strategy {} with {} segments, fusion {}", model.strategy, cfg.task.segments, model.fusion);
    println!("train for {} epochs at lr {}", cfg.train_config().epochs, cfg.adam.lr);

    let written = cfg.write();
    assert_eq!(RunConfig::parse(&written)?, cfg);
    println!("--- full configuration ---\n{written}");

    match RunConfig::parse("train.epoch = 3") {
        Err(e) => println!("a typo is rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
