//! Reduced task shared by the ablation examples.

use avqa::harness::ablation::AblationConfig;
use avqa::harness::task::TaskConfig;
use avqa::harness::train::TrainConfig;
use avqa::numerics::AdamConfig;

/// Small enough for a few minutes of CPU per seed.
pub fn reduced_config(seeds: usize) -> AblationConfig {
    AblationConfig {
        task: TaskConfig {
            segments: 48,
            width: 32,
            heads: 4,
            train_size: 600,
            val_size: 0,
            test_size: 200,
            ..TaskConfig::default()
        },
        seeds: (0..seeds as u64).collect(),
        train: TrainConfig {
            epochs: 4,
            adam: AdamConfig {
                lr: 2e-3,
                decay_every: 0,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        },
        ..AblationConfig::default()
    }
}

pub fn seeds_arg() -> usize {
    std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1)
}

pub fn progress(r: &avqa::harness::ablation::RunResult) {
    eprintln!("{} seed {}: {:.1}% in {:.0}s", r.arm, r.seed, 100.0 * r.evaluation.accuracy(), r.seconds);
}
