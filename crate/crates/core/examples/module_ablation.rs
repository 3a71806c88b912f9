//! Switches question-guided fusion and the Gaussian experts on and off on
//! a reduced task and prints the four-arm table.
//!
//! ```text
//! cargo run --release --example module_ablation [seeds]
//! ```

mod common;

use avqa::harness::ablation::{module_arms, run_ablation};

fn main() -> avqa::Result<()> {
    let cfg = common::reduced_config(common::seeds_arg());
    let report = run_ablation(&cfg, &module_arms(cfg.task.experts), common::progress)?;
    println!("{report}");
    Ok(())
}
