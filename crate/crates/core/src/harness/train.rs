//! Mini-batch Adam training.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::RawInputs;
use crate::harness::evaluate::evaluate;
use crate::harness::task::SyntheticSample;
use crate::io::container::write_container;
use crate::model::Model;
use crate::numerics::{lit, AdamConfig, AdamState, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Drives shuffling and dropout masks.
    pub seed: u64,
    /// Apply the model's attention dropout while training.
    pub dropout: bool,
    /// When set, `epoch_NNN.qtgf` is written here after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            dropout: true,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch (with dropout, before each update).
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

/// Per-sample dropout seed; distinct for every (seed, epoch, position).
fn dropout_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for x in [epoch as u64, position as u64] {
        h = (h ^ x).wrapping_mul(0x0100_0000_01b3).rotate_left(29);
    }
    h
}

fn accumulate<T: Real>(acc: &mut [Tensor<T>], grads: &[Tensor<T>]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += *y;
        }
    }
}

pub fn train<T: Real>(
    model: &mut Model<T>,
    samples: &[SyntheticSample],
    val: &[SyntheticSample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_with_progress(model, samples, val, cfg, |_| {})
}

/// Trains in place; `progress` sees each epoch's log line as it finishes.
///
/// Samples are shuffled every epoch, gradients are averaged over each
/// batch, and the learning rate follows the step schedule of the Adam
/// config. Everything is deterministic given the seed.
pub fn train_with_progress<T: Real>(
    model: &mut Model<T>,
    samples: &[SyntheticSample],
    val: &[SyntheticSample],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let inputs: Vec<RawInputs<T>> = samples.iter().map(|s| s.inputs.cast()).collect();
    let mut adam = AdamState::new(cfg.adam.clone(), model.store.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        adam.set_epoch(epoch);
        let lr = adam.current_lr();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Tensor<T>> = model.store.tensors().iter().map(|p| Tensor::zeros(p.dims())).collect();
            for (j, &i) in batch.iter().enumerate() {
                let seed = cfg
                    .dropout
                    .then(|| dropout_seed(cfg.seed, epoch, step * cfg.batch_size + j));
                let out = match model.loss_and_grads(&inputs[i], samples[i].label, seed) {
                    Err(Error::NonFinite(_)) => {
                        return Err(Error::Diverged {
                            epoch: epoch + 1,
                            step,
                            loss: f64::NAN,
                        })
                    }
                    other => other?,
                };
                if !out.loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        step,
                        loss: out.loss,
                    });
                }
                loss_sum += out.loss;
                correct += usize::from(out.predicted == samples[i].label);
                accumulate(&mut acc, &out.grads);
            }
            let inv = lit::<T>(1.0 / batch.len() as f64);
            for g in &mut acc {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            adam.step(model.store.tensors_mut(), &acc)?;
        }
        if model.store.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                step: order.len().div_ceil(cfg.batch_size),
                loss: f64::NAN,
            });
        }
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(evaluate(model, val)?.accuracy())
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / samples.len() as f64,
            train_accuracy: correct as f64 / samples.len() as f64,
            val_accuracy,
        };
        if let Some(dir) = &cfg.checkpoint_dir {
            write_container(dir.join(format!("epoch_{:03}.qtgf", epoch + 1)), &model.checkpoint())?;
        }
        progress(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}
