//! Accuracy as a function of the number of Gaussian experts.
//!
//! ```text
//! cargo run --release --example expert_sweep [seeds]
//! ```

mod common;

use avqa::harness::ablation::{expert_arms, run_ablation};

fn main() -> avqa::Result<()> {
    let cfg = common::reduced_config(common::seeds_arg());
    let report = run_ablation(&cfg, &expert_arms(&[1, 3, 5, 7]), common::progress)?;
    println!("{report}");
    Ok(())
}
