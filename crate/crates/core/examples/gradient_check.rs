//! Finite-difference gradient check of the whole model, once per pooling
//! strategy with and without fusion.
//!
//! ```text
//! cargo run --release --example gradient_check [seed]
//! ```

use std::time::Instant;

use avqa::model::gradient_suite;

fn main() -> avqa::Result<()> {
    let seed = std::env::args().nth(1).map_or(Ok(1), |s| s.parse()).unwrap_or(1);
    let start = Instant::now();
    let reports = gradient_suite(seed)?;
    let mut worst: f64 = 0.0;
    for (name, r) in &reports {
        println!("{name:<40} probes {:>6}  max rel err {:.3e}", r.probes, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    println!("worst {worst:.3e} in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
