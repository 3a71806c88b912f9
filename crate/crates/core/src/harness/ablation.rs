//! Multi-seed comparisons between model variants on one synthetic task.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::harness::baseline::PoolingStrategy;
use crate::harness::evaluate::{evaluate, Evaluation};
use crate::harness::task::{generate_task, QuestionFamily, TaskConfig, TaskData};
use crate::harness::train::{train, TrainConfig};
use crate::model::{Model, ModelConfig, ModelOptions};
use crate::numerics::Real;

/// One model variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub label: String,
    pub fusion: bool,
    pub strategy: PoolingStrategy,
}

impl Arm {
    pub fn new(label: impl Into<String>, fusion: bool, strategy: PoolingStrategy) -> Self {
        Self {
            label: label.into(),
            fusion,
            strategy,
        }
    }
}

/// The four on/off combinations of fusion and Gaussian experts.
pub fn module_arms(experts: usize) -> Vec<Arm> {
    let ge = PoolingStrategy::GaussianExperts(experts);
    vec![
        Arm::new("both_off", false, PoolingStrategy::Uniform),
        Arm::new("fusion_only", true, PoolingStrategy::Uniform),
        Arm::new("experts_only", false, ge),
        Arm::new("both_on", true, ge),
    ]
}

/// Every temporal strategy with fusion on.
pub fn strategy_arms(experts: usize, top_k: usize) -> Vec<Arm> {
    [
        PoolingStrategy::Uniform,
        PoolingStrategy::TopK(top_k),
        PoolingStrategy::Gaussian(experts),
        PoolingStrategy::WeightedGaussian(experts),
        PoolingStrategy::WeightedGaussianDisjoint(experts),
        PoolingStrategy::GaussianExperts(experts),
    ]
    .into_iter()
    .map(|s| Arm::new(s.to_string(), true, s))
    .collect()
}

/// Gaussian experts with fusion on, one arm per expert count.
pub fn expert_arms(counts: &[usize]) -> Vec<Arm> {
    counts
        .iter()
        .map(|&e| Arm::new(format!("experts_{e}"), true, PoolingStrategy::GaussianExperts(e)))
        .collect()
}

/// Floating-point type used for training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    /// Roughly twice as fast; what the ablations use.
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub task: TaskConfig,
    /// Each seed sets both parameter initialization and training order.
    /// The dataset comes from `task.seed` and is shared by every run.
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub options: ModelOptions,
    pub precision: Precision,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
            options: ModelOptions::default(),
            precision: Precision::F32,
        }
    }
}

/// Test-set result of one (arm, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub arm: String,
    pub seed: u64,
    pub evaluation: Evaluation,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: usize,
    /// Accuracy in `[0, 1]`, averaged over seeds.
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: f64,
    pub families: Vec<(QuestionFamily, f64)>,
}

impl ArmSummary {
    pub fn family(&self, family: QuestionFamily) -> Option<f64> {
        self.families.iter().find(|(f, _)| *f == family).map(|&(_, a)| a)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<RunResult>,
    pub summaries: Vec<ArmSummary>,
}

impl AblationReport {
    pub fn summary(&self, arm: &str) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<32} {:>5} {:>16}", "arm", "seeds", "acc(%)")?;
        for fam in QuestionFamily::ALL {
            write!(f, " {:>15}", fam.name())?;
        }
        for s in &self.summaries {
            write!(
                f,
                "\n{:<32} {:>5} {:>8.2} ± {:<5.2}",
                s.arm,
                s.runs,
                100.0 * s.mean,
                100.0 * s.std
            )?;
            for fam in QuestionFamily::ALL {
                match s.family(fam) {
                    Some(a) => write!(f, " {:>15.2}", 100.0 * a)?,
                    None => write!(f, " {:>15}", "-")?,
                }
            }
        }
        Ok(())
    }
}

fn run_typed<T: Real>(data: &TaskData, config: ModelConfig, seed: u64, train_cfg: &TrainConfig) -> Result<Evaluation> {
    let mut model = Model::<T>::new(config, seed)?;
    train(&mut model, &data.train, &[], train_cfg)?;
    evaluate(&model, &data.test)
}

/// Trains one arm from scratch and scores it on the test split.
pub fn run_arm(data: &TaskData, arm: &Arm, seed: u64, cfg: &AblationConfig) -> Result<RunResult> {
    let config = ModelConfig::for_task(&data.config, arm.fusion, arm.strategy, &cfg.options);
    let train_cfg = TrainConfig {
        seed,
        checkpoint_dir: None,
        ..cfg.train.clone()
    };
    let start = Instant::now();
    let evaluation = match cfg.precision {
        Precision::F32 => run_typed::<f32>(data, config, seed, &train_cfg)?,
        Precision::F64 => run_typed::<f64>(data, config, seed, &train_cfg)?,
    };
    Ok(RunResult {
        arm: arm.label.clone(),
        seed,
        evaluation,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean and spread per arm, in the order arms first appear in `runs`.
pub fn summarize(runs: &[RunResult]) -> Vec<ArmSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.arm.as_str()) {
            order.push(&r.arm);
        }
    }
    order
        .into_iter()
        .map(|arm| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.arm == arm).collect();
            let n = mine.len() as f64;
            let accs: Vec<f64> = mine.iter().map(|r| r.evaluation.accuracy()).collect();
            let mean = accs.iter().sum::<f64>() / n;
            let std = if mine.len() > 1 {
                (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            let families = QuestionFamily::ALL
                .into_iter()
                .filter_map(|fam| {
                    let scores: Vec<f64> = mine
                        .iter()
                        .filter_map(|r| r.evaluation.family(fam).map(|s| s.accuracy()))
                        .collect();
                    (!scores.is_empty()).then(|| (fam, scores.iter().sum::<f64>() / scores.len() as f64))
                })
                .collect();
            ArmSummary {
                arm: arm.to_string(),
                runs: mine.len(),
                mean,
                std,
                families,
            }
        })
        .collect()
}

/// Runs every arm under every seed on one generated task.
pub fn run_ablation(cfg: &AblationConfig, arms: &[Arm], mut progress: impl FnMut(&RunResult)) -> Result<AblationReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one seed".into()));
    }
    if arms.is_empty() {
        return Err(Error::Config("an ablation needs at least one arm".into()));
    }
    let data = generate_task(&cfg.task)?;
    let mut runs = Vec::with_capacity(arms.len() * cfg.seeds.len());
    for arm in arms {
        for &seed in &cfg.seeds {
            let r = run_arm(&data, arm, seed, cfg)?;
            progress(&r);
            runs.push(r);
        }
    }
    Ok(AblationReport {
        summaries: summarize(&runs),
        runs,
    })
}
