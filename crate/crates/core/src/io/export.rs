//! CSV exports: Gaussian curves, training logs and ablation tables.
//!
//! Floats are written in Rust's shortest round-trip form, so every number
//! parses back to the exact value and repeated exports are byte-identical.

use std::path::Path;

use crate::error::{Error, Result};
use crate::experts::GaussianMixtureState;
use crate::harness::ablation::AblationReport;
use crate::harness::task::QuestionFamily;
use crate::harness::train::TrainLog;

fn to_bytes(rows: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    rows(&mut w)?;
    w.into_inner()
        .map_err(|e| Error::Contract(format!("csv buffer: {}", e.error())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Label used in the `expert` column of the routed-sum rows.
pub const INTEGRATED: &str = "integrated";

/// Curve table with header `modality,expert,routing,t,weight`.
///
/// One row per (expert, t) for every given modality, then `integrated`
/// rows holding `sum_i r_i g[i, t]`; their routing column is `sum_i r_i`.
pub fn curves_csv(states: &[(&str, &GaussianMixtureState)]) -> Result<Vec<u8>> {
    to_bytes(|w| {
        w.write_record(["modality", "expert", "routing", "t", "weight"])?;
        for (modality, s) in states {
            for (i, (r, curve)) in s.routing.iter().zip(&s.curves).enumerate() {
                for (t, g) in curve.iter().enumerate() {
                    w.write_record([*modality, &i.to_string(), &r.to_string(), &t.to_string(), &g.to_string()])?;
                }
            }
            let total: f64 = s.routing.iter().sum();
            for (t, x) in s.integrated().iter().enumerate() {
                w.write_record([*modality, INTEGRATED, &total.to_string(), &t.to_string(), &x.to_string()])?;
            }
        }
        Ok(())
    })
}

pub fn export_gaussian_curves(path: impl AsRef<Path>, states: &[(&str, &GaussianMixtureState)]) -> Result<()> {
    write_file(path.as_ref(), &curves_csv(states)?)
}

/// `epoch,lr,train_loss,train_accuracy,val_accuracy`; the last column is
/// empty without a validation split.
pub fn train_log_csv(log: &TrainLog) -> Result<Vec<u8>> {
    to_bytes(|w| {
        w.write_record(["epoch", "lr", "train_loss", "train_accuracy", "val_accuracy"])?;
        for e in &log.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.lr.to_string(),
                e.train_loss.to_string(),
                e.train_accuracy.to_string(),
                e.val_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        Ok(())
    })
}

pub fn export_train_log(path: impl AsRef<Path>, log: &TrainLog) -> Result<()> {
    write_file(path.as_ref(), &train_log_csv(log)?)
}

fn family_header(prefix: &[&str]) -> Vec<String> {
    prefix
        .iter()
        .map(|s| s.to_string())
        .chain(QuestionFamily::ALL.iter().map(|f| f.name().to_string()))
        .collect()
}

/// One row per (arm, seed): `arm,seed,accuracy,<families>,seconds`.
pub fn ablation_runs_csv(report: &AblationReport) -> Result<Vec<u8>> {
    to_bytes(|w| {
        let mut header = family_header(&["arm", "seed", "accuracy"]);
        header.push("seconds".into());
        w.write_record(&header)?;
        for r in &report.runs {
            let mut row = vec![r.arm.clone(), r.seed.to_string(), r.evaluation.accuracy().to_string()];
            row.extend(QuestionFamily::ALL.iter().map(|&f| {
                r.evaluation
                    .family(f)
                    .map(|s| s.accuracy().to_string())
                    .unwrap_or_default()
            }));
            row.push(format!("{:.3}", r.seconds));
            w.write_record(&row)?;
        }
        Ok(())
    })
}

/// One row per arm: `arm,runs,mean,std,<family means>`.
pub fn ablation_summary_csv(report: &AblationReport) -> Result<Vec<u8>> {
    to_bytes(|w| {
        w.write_record(family_header(&["arm", "runs", "mean", "std"]))?;
        for s in &report.summaries {
            let mut row = vec![s.arm.clone(), s.runs.to_string(), s.mean.to_string(), s.std.to_string()];
            row.extend(
                QuestionFamily::ALL
                    .iter()
                    .map(|&f| s.family(f).map(|a| a.to_string()).unwrap_or_default()),
            );
            w.write_record(&row)?;
        }
        Ok(())
    })
}

/// Writes `ablation_runs.csv` and `ablation_summary.csv` into `dir`.
pub fn export_ablation(dir: impl AsRef<Path>, report: &AblationReport) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("ablation_runs.csv"), &ablation_runs_csv(report)?)?;
    write_file(&dir.join("ablation_summary.csv"), &ablation_summary_csv(report)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::EpochLog;

    fn state() -> GaussianMixtureState {
        GaussianMixtureState {
            centers: vec![0.25, 0.75],
            widths: vec![0.1, 0.2],
            curves: vec![vec![1.0, 0.5, 0.1], vec![0.2, 0.6, 1.0]],
            routing: vec![0.3, 0.7],
        }
    }

    #[test]
    fn curve_rows_and_integrated_values() {
        let s = state();
        let text = String::from_utf8(curves_csv(&[("visual", &s), ("audio", &s)]).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // E = 2, T = 3, two modalities: 12 expert rows, 6 integrated, header
        assert_eq!(lines.len(), 1 + 12 + 6);
        assert_eq!(lines[0], "modality,expert,routing,t,weight");
        assert_eq!(lines[1], "visual,0,0.3,0,1");
        let integrated: Vec<&str> = lines.iter().copied().filter(|l| l.contains(INTEGRATED)).collect();
        assert_eq!(integrated.len(), 6);
        let w: f64 = integrated[1].rsplit(',').next().unwrap().parse().unwrap();
        assert!((w - (0.3 * 0.5 + 0.7 * 0.6)).abs() < 1e-15);
    }

    #[test]
    fn curve_export_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        export_gaussian_curves(&a, &[("visual", &state())]).unwrap();
        export_gaussian_curves(&b, &[("visual", &state())]).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn train_log_rows() {
        let log = TrainLog {
            epochs: vec![EpochLog {
                epoch: 1,
                lr: 1e-4,
                train_loss: 1.5,
                train_accuracy: 0.25,
                val_accuracy: None,
            }],
        };
        let text = String::from_utf8(train_log_csv(&log).unwrap()).unwrap();
        assert_eq!(text, "epoch,lr,train_loss,train_accuracy,val_accuracy\n1,0.0001,1.5,0.25,\n");
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let err = export_gaussian_curves("/nonexistent-dir/x.csv", &[("visual", &state())]).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x.csv"));
    }
}
