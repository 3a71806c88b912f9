//! Command-line front end. The `avqa` binary is a thin wrapper around
//! [`run`].
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::harness::ablation::{expert_arms, module_arms, run_ablation, Arm, Precision};
use crate::harness::baseline::PoolingStrategy;
use crate::harness::evaluate::evaluate;
use crate::harness::task::{generate_task, TaskConfig, TaskData};
use crate::harness::train::train_with_progress;
use crate::io::config::RunConfig;
use crate::io::container::{read_container, write_container};
use crate::io::dataset::{read_dataset, write_dataset};
use crate::io::export::{export_ablation, export_gaussian_curves, export_train_log};
use crate::model::{gradient_suite, Model};
use crate::numerics::Real;

#[derive(Parser, Debug)]
#[command(name = "avqa", version, about = "Audio-visual question answering on a synthetic benchmark")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for model initialization and training order.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace the task and model sizes with a preset.
    #[arg(long, global = true, value_enum)]
    dims: Option<Dims>,
    /// Dataset container written by gen-data; generated on the fly if absent.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dims {
    /// A few segments and an 8-wide model, for smoke tests.
    Tiny,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset into OUT/data.qtgf.
    GenData,
    /// Train one model; writes OUT/model.qtgf, per-epoch checkpoints,
    /// OUT/train_log.csv and the resolved OUT/run.cfg.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print per-family test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Multi-seed sweeps; writes OUT/ablation_runs.csv and
    /// OUT/ablation_summary.csv.
    Ablate {
        /// Comma-separated strategies, e.g. `uniform,top_k:10,gaussian_experts:7`
        /// (fusion on).
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<PoolingStrategy>,
        /// Comma-separated expert counts for a Gaussian-experts sweep.
        #[arg(long, value_delimiter = ',')]
        experts: Vec<usize>,
        /// Include the four fusion / experts on-off combinations. This is
        /// the default when no other sweep is given.
        #[arg(long)]
        modules: bool,
        /// Comma-separated seeds; overrides the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run a checkpoint on one test sample and write OUT/curves.csv.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Test-set index.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Finite-difference check of every strategy's full gradient; fails
    /// above the tolerance.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code. Normal output goes to `out`, messages to
/// `err`.
pub fn run_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

/// [`run_with`] on the process's standard streams.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(Dims::Tiny) = common.dims {
        let tiny = TaskConfig::tiny();
        cfg.task = TaskConfig {
            seed: cfg.task.seed,
            ..tiny.clone()
        };
        cfg.strategy = with_experts(cfg.strategy, tiny.experts);
        cfg.batch_size = cfg.batch_size.min(8);
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(d) = &common.data {
        cfg.data = Some(d.clone());
    }
    Ok(cfg)
}

fn with_experts(s: PoolingStrategy, e: usize) -> PoolingStrategy {
    match s {
        PoolingStrategy::Gaussian(_) => PoolingStrategy::Gaussian(e),
        PoolingStrategy::WeightedGaussian(_) => PoolingStrategy::WeightedGaussian(e),
        PoolingStrategy::WeightedGaussianDisjoint(_) => PoolingStrategy::WeightedGaussianDisjoint(e),
        PoolingStrategy::GaussianExperts(_) => PoolingStrategy::GaussianExperts(e),
        other => other,
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn load_data(cfg: &RunConfig) -> Result<TaskData> {
    match &cfg.data {
        Some(p) => read_dataset(p),
        None => generate_task(&cfg.task),
    }
}

/// A model of the configured architecture sized for `data`, with weights
/// from `ckpt` when given.
fn build_model<T: Real>(cfg: &RunConfig, data: &TaskData, ckpt: Option<&Path>) -> Result<Model<T>> {
    let cfg = RunConfig {
        task: data.config.clone(),
        ..cfg.clone()
    };
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    if let Some(path) = ckpt {
        model
            .load_checkpoint(&read_container(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    Ok(model)
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve(&cli.common)?;
    let say = |out: &mut dyn Write, text: String| -> Result<()> {
        writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
    };
    match cli.command {
        Command::GenData => {
            let dir = out_dir(&cfg)?;
            let data = generate_task(&cfg.task)?;
            let path = dir.join("data.qtgf");
            write_dataset(&path, &data, cfg.precision)?;
            say(
                out,
                format!(
                    "wrote {} ({} train, {} val, {} test)",
                    path.display(),
                    data.train.len(),
                    data.val.len(),
                    data.test.len()
                ),
            )
        }
        Command::Train { epochs } => {
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            match cfg.precision {
                Precision::F32 => train_cmd::<f32>(&cfg, out),
                Precision::F64 => train_cmd::<f64>(&cfg, out),
            }
        }
        Command::Eval { ckpt } => {
            let data = load_data(&cfg)?;
            let eval = match cfg.precision {
                Precision::F32 => evaluate(&build_model::<f32>(&cfg, &data, Some(&ckpt))?, &data.test)?,
                Precision::F64 => evaluate(&build_model::<f64>(&cfg, &data, Some(&ckpt))?, &data.test)?,
            };
            say(out, eval.to_string())
        }
        Command::Ablate {
            strategies,
            experts,
            modules,
            seeds,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if !seeds.is_empty() {
                cfg.seeds = seeds;
            }
            let mut arms: Vec<Arm> = strategies
                .into_iter()
                .map(|s| Arm::new(s.to_string(), true, s))
                .collect();
            arms.extend(expert_arms(&experts));
            if modules || arms.is_empty() {
                let e = cfg.strategy.experts().unwrap_or(cfg.task.experts);
                arms.splice(0..0, module_arms(e));
            }
            let dir = out_dir(&cfg)?;
            let ablation = RunConfig {
                task: load_data(&cfg)?.config,
                ..cfg.clone()
            }
            .ablation_config();
            let report = run_ablation(&ablation, &arms, |r| {
                let _ = writeln!(
                    out,
                    "{} seed {}: {:.2}% ({:.0}s)",
                    r.arm,
                    r.seed,
                    100.0 * r.evaluation.accuracy(),
                    r.seconds
                );
            })?;
            export_ablation(&dir, &report)?;
            say(out, report.to_string())
        }
        Command::Inspect { ckpt, sample } => {
            let data = load_data(&cfg)?;
            let s = data.test.get(sample).ok_or_else(|| {
                Error::Config(format!("sample {sample} out of range: {} test samples", data.test.len()))
            })?;
            let model = build_model::<f64>(&cfg, &data, Some(&ckpt))?;
            let (dist, visual, audio) = model.inspect(&s.inputs)?;
            say(
                out,
                format!(
                    "sample {sample} ({}): label {}, predicted {} (p = {:.3})",
                    s.family(),
                    s.label,
                    dist.predicted(),
                    dist.probs()[dist.predicted()]
                ),
            )?;
            let states: Vec<(&str, _)> = [("visual", visual.as_ref()), ("audio", audio.as_ref())]
                .into_iter()
                .filter_map(|(m, st)| st.map(|st| (m, st)))
                .collect();
            if states.is_empty() {
                return Err(Error::Config(format!(
                    "strategy {} produces no Gaussian curves",
                    model.config.strategy
                )));
            }
            let path = out_dir(&cfg)?.join("curves.csv");
            export_gaussian_curves(&path, &states)?;
            say(out, format!("wrote {}", path.display()))
        }
        Command::GradCheck { tolerance } => {
            let mut worst: f64 = 0.0;
            for (name, r) in gradient_suite(cfg.seed)? {
                say(out, format!("{name:<40} max rel err {:.3e}", r.max_rel_error))?;
                worst = worst.max(r.max_rel_error);
            }
            say(out, format!("max relative error {worst:.3e}"))?;
            if worst <= tolerance {
                Ok(())
            } else {
                Err(Error::Contract(format!("gradient error {worst:.3e} exceeds {tolerance:e}")))
            }
        }
    }
}

fn train_cmd<T: Real>(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = load_data(cfg)?;
    let mut model = build_model::<T>(cfg, &data, None)?;
    let mut train_cfg = cfg.train_config();
    train_cfg.checkpoint_dir = Some(dir.join("checkpoints"));
    // the resolved configuration, so eval and inspect can rebuild the model
    RunConfig {
        task: data.config.clone(),
        ..cfg.clone()
    }
    .save(dir.join("run.cfg"))?;
    let log = train_with_progress(&mut model, &data.train, &data.val, &train_cfg, |e| {
        let val = e.val_accuracy.map_or(String::new(), |a| format!(", val acc {:.2}%", 100.0 * a));
        let _ = writeln!(
            out,
            "epoch {}: lr {:.2e}, loss {:.4}, train acc {:.2}%{val}",
            e.epoch,
            e.lr,
            e.train_loss,
            100.0 * e.train_accuracy
        );
    })?;
    write_container(dir.join("model.qtgf"), &model.checkpoint())?;
    export_train_log(dir.join("train_log.csv"), &log)?;
    writeln!(out, "wrote {}", dir.join("model.qtgf").display()).map_err(|e| Error::io("<stdout>", e))
}
