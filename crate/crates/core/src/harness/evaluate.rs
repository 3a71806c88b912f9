//! Accuracy overall and per question family.

use std::fmt;

use crate::error::{Error, Result};
use crate::fusion::RawInputs;
use crate::harness::task::{QuestionFamily, SyntheticSample};
use crate::model::Model;
use crate::numerics::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FamilyScore {
    pub family: QuestionFamily,
    pub correct: usize,
    pub total: usize,
}

impl FamilyScore {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    /// Only families that occur in the evaluated set, in canonical order.
    pub families: Vec<FamilyScore>,
    /// Mean cross-entropy, when the predictions came from a model.
    pub mean_loss: Option<f64>,
}

impl Evaluation {
    /// Exact-match rate in `[0, 1]`.
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn family(&self, family: QuestionFamily) -> Option<&FamilyScore> {
        self.families.iter().find(|f| f.family == family)
    }
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>8} {:>8}", "family", "samples", "acc(%)")?;
        for s in &self.families {
            writeln!(f, "{:<16} {:>8} {:>8.2}", s.family.name(), s.total, 100.0 * s.accuracy())?;
        }
        write!(f, "{:<16} {:>8} {:>8.2}", "overall", self.total, 100.0 * self.accuracy())
    }
}

/// Scores predicted class indices against the samples' labels.
pub fn score(predictions: &[usize], samples: &[SyntheticSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    if predictions.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let mut families: Vec<FamilyScore> = QuestionFamily::ALL
        .iter()
        .map(|&family| FamilyScore {
            family,
            correct: 0,
            total: 0,
        })
        .collect();
    for (&p, s) in predictions.iter().zip(samples) {
        let f = &mut families[s.family().index()];
        f.total += 1;
        f.correct += usize::from(p == s.label);
    }
    families.retain(|f| f.total > 0);
    Ok(Evaluation {
        correct: families.iter().map(|f| f.correct).sum(),
        total: samples.len(),
        families,
        mean_loss: None,
    })
}

/// Runs the model on every sample without dropout.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[SyntheticSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let mut predictions = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for s in samples {
        let inputs: RawInputs<T> = s.inputs.cast();
        let dist = model.predict(&inputs)?;
        loss += dist.loss(s.label)?;
        predictions.push(dist.predicted());
    }
    let mut eval = score(&predictions, samples)?;
    eval.mean_loss = Some(loss / samples.len() as f64);
    Ok(eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::task::{generate_task, TaskConfig};

    fn data() -> Vec<SyntheticSample> {
        let cfg = TaskConfig {
            train_size: 200,
            val_size: 0,
            test_size: 0,
            ..TaskConfig::tiny()
        };
        generate_task(&cfg).unwrap().train
    }

    #[test]
    fn oracle_predictions_score_one() {
        let d = data();
        let labels: Vec<usize> = d.iter().map(|s| s.label).collect();
        let e = score(&labels, &d).unwrap();
        assert_eq!(e.accuracy(), 1.0);
        assert!(e.families.iter().all(|f| f.accuracy() == 1.0));
    }

    #[test]
    fn constant_predictor_is_near_chance() {
        // on a four-answer family with balanced labels a constant guess
        // scores a quarter
        let cfg = TaskConfig {
            max_events: 3,
            classes: 4,
            train_size: 400,
            val_size: 0,
            test_size: 0,
            ..TaskConfig::default()
        };
        let d: Vec<_> = generate_task(&cfg)
            .unwrap()
            .train
            .into_iter()
            .filter(|s| s.family() == QuestionFamily::Counting)
            .collect();
        let e = score(&vec![2; d.len()], &d).unwrap();
        assert!((e.accuracy() - 0.25).abs() <= 0.03);
    }

    #[test]
    fn one_row_per_present_family() {
        let d = data();
        assert_eq!(score(&vec![0; d.len()], &d).unwrap().families.len(), 4);
        let only: Vec<_> = d.into_iter().filter(|s| s.family() == QuestionFamily::Comparative).collect();
        let e = score(&vec![0; only.len()], &only).unwrap();
        assert_eq!(e.families.len(), 1);
        assert_eq!(e.families[0].family, QuestionFamily::Comparative);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(score(&[], &[]).is_err());
    }
}
