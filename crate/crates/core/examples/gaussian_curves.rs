//! Prints the temporal Gaussian mixture an untrained model assigns to one
//! question and writes the curves as CSV.
//!
//! ```text
//! cargo run --release --example gaussian_curves [out.csv]
//! ```

use avqa::harness::baseline::PoolingStrategy;
use avqa::harness::task::{generate_task, TaskConfig};
use avqa::io::export::export_gaussian_curves;
use avqa::{Model, ModelConfig, ModelOptions};

fn main() -> avqa::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "curves.csv".into());
    let task = TaskConfig {
        segments: 20,
        test_size: 4,
        ..TaskConfig::tiny()
    };
    let data = generate_task(&task)?;
    let config = ModelConfig::for_task(&task, true, PoolingStrategy::GaussianExperts(5), &ModelOptions::default());
    let model = Model::<f64>::new(config, 7)?;
    let sample = &data.test[0];
    let (answer, visual, audio) = model.inspect(&sample.inputs)?;
    let (visual, audio) = (visual.expect("gaussian strategy"), audio.expect("gaussian strategy"));
    println!("{} question, predicted class {} (label {})", sample.family(), answer.predicted(), sample.label);
    for (name, s) in [("visual", &visual), ("audio", &audio)] {
        println!("{name}:");
        for i in 0..s.experts() {
            println!("  expert {i}  center {:.3}  width {:.3}  routing {:.3}", s.centers[i], s.widths[i], s.routing[i]);
        }
        let bars: String = s
            .integrated()
            .iter()
            .map(|w| [' ', '.', ':', '-', '=', '+', '*', '#'][((w * 7.0).round() as usize).min(7)])
            .collect();
        println!("  integrated |{bars}|");
    }
    export_gaussian_curves(&out, &[("visual", &visual), ("audio", &audio)])?;
    println!("wrote {out}");
    Ok(())
}
