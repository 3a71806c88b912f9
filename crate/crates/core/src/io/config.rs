//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key may
//! appear at most once, and unknown keys are errors so that typos never
//! silently fall back to defaults. Missing keys keep their defaults.
//!
//! ```text
//! # three seeds of the default task
//! seeds = 0,1,2
//! model.strategy = gaussian_experts:7
//! train.epochs = 6
//! ```

use std::collections::HashSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::ablation::{AblationConfig, Precision};
use crate::harness::baseline::PoolingStrategy;
use crate::harness::task::TaskConfig;
use crate::harness::train::TrainConfig;
use crate::model::{ModelConfig, ModelOptions};
use crate::numerics::AdamConfig;

/// Everything a CLI run needs besides its subcommand.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub fusion: bool,
    pub strategy: PoolingStrategy,
    pub options: ModelOptions,
    pub epochs: usize,
    pub batch_size: usize,
    /// Attention dropout while training.
    pub train_dropout: bool,
    pub adam: AdamConfig,
    pub precision: Precision,
    /// Model initialization and training order of single runs.
    pub seed: u64,
    /// Seeds of an ablation.
    pub seeds: Vec<u64>,
    /// Dataset container; generated from `task` when absent.
    pub data: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
}

/// The settings tuned for the default synthetic task: a short constant
/// learning-rate schedule in single precision.
impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            fusion: true,
            strategy: PoolingStrategy::GaussianExperts(7),
            options: ModelOptions::default(),
            epochs: 6,
            batch_size: 32,
            train_dropout: true,
            adam: AdamConfig {
                lr: 2e-3,
                decay_every: 0,
                ..AdamConfig::default()
            },
            precision: Precision::F32,
            seed: 0,
            seeds: vec![0, 1, 2],
            data: None,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_seeds(key: &str, value: &str) -> Result<Vec<u64>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Every key, in the order `write` emits them.
    pub const KEYS: [&'static str; 37] = [
        "seed",
        "seeds",
        "precision",
        "data",
        "out",
        "task.segments",
        "task.visual_dim",
        "task.audio_dim",
        "task.patches",
        "task.classes",
        "task.experts",
        "task.heads",
        "task.width",
        "task.signatures",
        "task.max_events",
        "task.event_len",
        "task.max_distractors",
        "task.noise",
        "task.amplitude",
        "task.train_size",
        "task.val_size",
        "task.test_size",
        "task.seed",
        "model.fusion",
        "model.strategy",
        "model.dropout",
        "model.normalize_time",
        "model.patch_residual",
        "train.epochs",
        "train.batch_size",
        "train.dropout",
        "train.lr",
        "train.beta1",
        "train.beta2",
        "train.eps",
        "train.decay_factor",
        "train.decay_every",
    ];

    /// Assigns one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.task;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "seeds" => self.seeds = parse_seeds(key, value)?,
            "precision" => self.precision = value.parse()?,
            "data" => self.data = parse_path(value),
            "out" => self.out = parse_path(value),
            "task.segments" => t.segments = parse(key, value)?,
            "task.visual_dim" => t.visual_dim = parse(key, value)?,
            "task.audio_dim" => t.audio_dim = parse(key, value)?,
            "task.patches" => t.patches = parse(key, value)?,
            "task.classes" => t.classes = parse(key, value)?,
            "task.experts" => t.experts = parse(key, value)?,
            "task.heads" => t.heads = parse(key, value)?,
            "task.width" => t.width = parse(key, value)?,
            "task.signatures" => t.signatures = parse(key, value)?,
            "task.max_events" => t.max_events = parse(key, value)?,
            "task.event_len" => t.event_len = parse(key, value)?,
            "task.max_distractors" => t.max_distractors = parse(key, value)?,
            "task.noise" => t.noise = parse(key, value)?,
            "task.amplitude" => t.amplitude = parse(key, value)?,
            "task.train_size" => t.train_size = parse(key, value)?,
            "task.val_size" => t.val_size = parse(key, value)?,
            "task.test_size" => t.test_size = parse(key, value)?,
            "task.seed" => t.seed = parse(key, value)?,
            "model.fusion" => self.fusion = parse(key, value)?,
            "model.strategy" => self.strategy = value.parse()?,
            "model.dropout" => self.options.dropout = parse(key, value)?,
            "model.normalize_time" => self.options.normalize_time = parse(key, value)?,
            "model.patch_residual" => self.options.patch_residual = value.parse()?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.dropout" => self.train_dropout = parse(key, value)?,
            "train.lr" => self.adam.lr = parse(key, value)?,
            "train.beta1" => self.adam.beta1 = parse(key, value)?,
            "train.beta2" => self.adam.beta2 = parse(key, value)?,
            "train.eps" => self.adam.eps = parse(key, value)?,
            "train.decay_factor" => self.adam.decay_factor = parse(key, value)?,
            "train.decay_every" => self.adam.decay_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of every key as text that `set` accepts.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        fn s(v: impl Display) -> String {
            v.to_string()
        }
        let t = &self.task;
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("seed", s(self.seed)),
            ("seeds", seeds),
            ("precision", s(self.precision)),
            ("data", show_path(&self.data)),
            ("out", show_path(&self.out)),
            ("task.segments", s(t.segments)),
            ("task.visual_dim", s(t.visual_dim)),
            ("task.audio_dim", s(t.audio_dim)),
            ("task.patches", s(t.patches)),
            ("task.classes", s(t.classes)),
            ("task.experts", s(t.experts)),
            ("task.heads", s(t.heads)),
            ("task.width", s(t.width)),
            ("task.signatures", s(t.signatures)),
            ("task.max_events", s(t.max_events)),
            ("task.event_len", s(t.event_len)),
            ("task.max_distractors", s(t.max_distractors)),
            ("task.noise", s(t.noise)),
            ("task.amplitude", s(t.amplitude)),
            ("task.train_size", s(t.train_size)),
            ("task.val_size", s(t.val_size)),
            ("task.test_size", s(t.test_size)),
            ("task.seed", s(t.seed)),
            ("model.fusion", s(self.fusion)),
            ("model.strategy", s(self.strategy)),
            ("model.dropout", s(self.options.dropout)),
            ("model.normalize_time", s(self.options.normalize_time)),
            ("model.patch_residual", s(self.options.patch_residual)),
            ("train.epochs", s(self.epochs)),
            ("train.batch_size", s(self.batch_size)),
            ("train.dropout", s(self.train_dropout)),
            ("train.lr", s(self.adam.lr)),
            ("train.beta1", s(self.adam.beta1)),
            ("train.beta2", s(self.adam.beta2)),
            ("train.eps", s(self.adam.eps)),
            ("train.decay_factor", s(self.adam.decay_factor)),
            ("train.decay_every", s(self.adam.decay_every)),
        ]
    }

    /// Parses text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key:?} given twice", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    /// Every key, one per line, in a form `parse` reads back unchanged.
    pub fn write(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.write()).map_err(|e| Error::io(path, e))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::for_task(&self.task, self.fusion, self.strategy, &self.options)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam.clone(),
            seed: self.seed,
            dropout: self.train_dropout,
            checkpoint_dir: None,
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            task: self.task.clone(),
            seeds: self.seeds.clone(),
            train: self.train_config(),
            options: self.options.clone(),
            precision: self.precision,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::PatchResidual;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.write()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_written_once() {
        let keys: Vec<&str> = RunConfig::default().entries().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, RunConfig::KEYS);
    }

    #[test]
    fn edited_values_round_trip() {
        let text = "
            # comment
            seeds = 4, 5
            data = /tmp/d.qtgf
            task.noise = 0.1
            model.strategy = top_k:3
            model.patch_residual = visual_only
            train.lr = 0.000123456789
        ";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.data, Some(PathBuf::from("/tmp/d.qtgf")));
        assert_eq!(cfg.strategy, PoolingStrategy::TopK(3));
        assert_eq!(cfg.options.patch_residual, PatchResidual::VisualOnly);
        assert_eq!(cfg.adam.lr, 0.000123456789);
        assert_eq!(RunConfig::parse(&cfg.write()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("train.lr = 1e-3\ntrain.learning_rate = 1").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("train.learning_rate"), "{err}");
    }

    #[test]
    fn malformed_lines() {
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("model.strategy = bogus").is_err());
    }
}
