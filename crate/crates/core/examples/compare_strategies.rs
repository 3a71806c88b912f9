//! Every temporal pooling strategy, fusion on, on a reduced task.
//! Temporal-order questions separate the position-blind baselines from
//! the Gaussian ones.
//!
//! ```text
//! cargo run --release --example compare_strategies [seeds]
//! ```

mod common;

use avqa::harness::ablation::{run_ablation, strategy_arms};

fn main() -> avqa::Result<()> {
    let cfg = common::reduced_config(common::seeds_arg());
    let report = run_ablation(&cfg, &strategy_arms(cfg.task.experts, 3), common::progress)?;
    println!("{report}");
    Ok(())
}
