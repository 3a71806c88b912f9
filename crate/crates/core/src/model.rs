//! The assembled answer-prediction model.

use crate::error::{Error, Result};
use crate::experts::{
    patch_streams, temporal_integration, GaussianMixtureState, PatchResidual, TemporalOutput,
    TemporalParams,
};
use crate::fusion::{
    fuse_modalities, project_inputs, refine_patches, FusedFeatures, FusionParams, InputProjection,
    RawInputs,
};
use crate::harness::baseline::{baseline_pool, PoolingStrategy};
use crate::harness::task::TaskConfig;
use crate::io::container::{named, NamedTensors, StoredTensor};
use crate::numerics::{grad_check, GradCheckReport, Graph, Real, Tensor, Var};
use crate::params::{Ctx, Dropout, Init, ParamStore};
use crate::reasoning::{fuse_av, fuse_visual, logits, qa_loss, AnswerDistribution, ReasoningParams};

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub question_dim: usize,
    /// Common model width `D`.
    pub width: usize,
    pub heads: usize,
    pub classes: usize,
    /// Attention-probability dropout during training.
    pub dropout: f64,
    /// Question-aware fusion and patch refinement. When off, the streams
    /// pass through unchanged and the sentence feature is multiplied into
    /// the final feature instead.
    pub fusion: bool,
    pub strategy: PoolingStrategy,
    /// Divide every mask by its time sum before integration.
    pub normalize_time: bool,
    pub patch_residual: PatchResidual,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            visual_dim: 768,
            audio_dim: 128,
            question_dim: 768,
            width: 512,
            heads: 8,
            classes: 42,
            dropout: 0.1,
            fusion: true,
            strategy: PoolingStrategy::GaussianExperts(7),
            normalize_time: false,
            patch_residual: PatchResidual::ModalityMatched,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.visual_dim,
            self.audio_dim,
            self.question_dim,
            self.width,
            self.heads,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("all dimensions must be positive: {self:?}")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 answer classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.strategy.validate()
    }
}

/// Model settings that are not fixed by the task shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOptions {
    pub dropout: f64,
    pub normalize_time: bool,
    pub patch_residual: PatchResidual,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            dropout: 0.1,
            normalize_time: false,
            patch_residual: PatchResidual::ModalityMatched,
        }
    }
}

impl ModelConfig {
    /// Dimensions from a task, plus the two ablation switches.
    pub fn for_task(task: &TaskConfig, fusion: bool, strategy: PoolingStrategy, options: &ModelOptions) -> Self {
        Self {
            visual_dim: task.visual_dim,
            audio_dim: task.audio_dim,
            question_dim: task.question_dim(),
            width: task.width,
            heads: task.heads,
            classes: task.classes,
            dropout: options.dropout,
            fusion,
            strategy,
            normalize_time: options.normalize_time,
            patch_residual: options.patch_residual,
        }
    }
}

/// Parameters plus the structure that addresses them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub input: InputProjection,
    pub fusion: Option<FusionParams>,
    pub temporal: Option<TemporalParams>,
    pub reasoning: ReasoningParams,
}

/// Graph handles and inspection values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub fused: FusedFeatures,
    pub temporal: TemporalOutput,
    pub sentence: Var,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let d = config.width;
        let input = InputProjection::init(
            &mut store,
            config.visual_dim,
            config.audio_dim,
            config.question_dim,
            d,
            &mut init,
        )?;
        let fusion = config
            .fusion
            .then(|| FusionParams::init(&mut store, d, config.heads, &mut init))
            .transpose()?;
        let temporal = match config.strategy.experts() {
            Some(e) => {
                let banks = matches!(config.strategy, PoolingStrategy::GaussianExperts(_));
                Some(TemporalParams::init(&mut store, d, config.heads, e, banks, &mut init)?)
            }
            None => None,
        };
        let reasoning = ReasoningParams::init(&mut store, d, config.heads, config.classes, &mut init)?;
        Ok(Self {
            config,
            store,
            input,
            fusion,
            temporal,
            reasoning,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for (name, t) in self.store.iter() {
            store.add(name, t.cast()).expect("names are unique");
        }
        Model {
            config: self.config.clone(),
            store,
            input: self.input,
            fusion: self.fusion,
            temporal: self.temporal.clone(),
            reasoning: self.reasoning,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, raw: &RawInputs<T>) -> Result<ForwardOutput> {
        let (feat, q) = project_inputs(ctx, &self.input, raw)?;
        let fused = match &self.fusion {
            Some(params) => {
                let (visual, audio) = fuse_modalities(ctx, &feat, &q, params)?;
                let (patch_visual, patch_audio) = refine_patches(ctx, &feat, visual, audio, params)?;
                FusedFeatures {
                    visual,
                    audio,
                    patch_visual,
                    patch_audio,
                }
            }
            None => {
                let mean = ctx.graph.mean_axis(feat.patches)?;
                FusedFeatures {
                    visual: feat.visual,
                    audio: feat.audio,
                    patch_visual: mean,
                    patch_audio: mean,
                }
            }
        };

        let strategy = self.config.strategy;
        let temporal = match (strategy.temporal_options(self.config.normalize_time), &self.temporal) {
            (Some(options), Some(params)) => temporal_integration(
                ctx,
                &fused,
                q.sentence,
                params,
                options,
                self.config.patch_residual,
            )?,
            (Some(_), None) => {
                return Err(Error::Config(format!("{strategy} needs temporal parameters")))
            }
            (None, _) => {
                let (pv, pa) = patch_streams(ctx, &fused, self.config.patch_residual)?;
                TemporalOutput {
                    patch_visual: baseline_pool(ctx, strategy, pv, q.sentence, None)?,
                    patch_audio: baseline_pool(ctx, strategy, pa, q.sentence, None)?,
                    audio: baseline_pool(ctx, strategy, fused.audio, q.sentence, None)?,
                    visual_curves: None,
                    audio_curves: None,
                    visual_state: None,
                    audio_state: None,
                }
            }
        };

        let fv = fuse_visual(ctx, &self.reasoning, q.sentence, temporal.patch_audio, temporal.patch_visual)?;
        let fva = fuse_av(ctx, &self.reasoning, q.sentence, temporal.audio, fv)?;
        let head_input = if self.fusion.is_none() {
            ctx.graph.mul(fva, q.sentence)?
        } else {
            fva
        };
        let logits = logits(ctx, &self.reasoning, head_input)?;
        Ok(ForwardOutput {
            logits,
            fused,
            temporal,
            sentence: q.sentence,
        })
    }

    /// Inference without dropout.
    pub fn predict(&self, raw: &RawInputs<T>) -> Result<AnswerDistribution> {
        Ok(self.inspect(raw)?.0)
    }

    /// Prediction plus the visual and audio mixtures (when the strategy
    /// has any).
    pub fn inspect(
        &self,
        raw: &RawInputs<T>,
    ) -> Result<(AnswerDistribution, Option<GaussianMixtureState>, Option<GaussianMixtureState>)> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.store, false);
        let out = self.forward(&mut ctx, raw)?;
        let dist = AnswerDistribution::from_logits(ctx.value(out.logits).to_f64_vec());
        Ok((dist, out.temporal.visual_state, out.temporal.audio_state))
    }

    /// Loss, prediction and per-parameter gradients for one labelled
    /// sample. Dropout is active only when a seed is given.
    pub fn loss_and_grads(
        &self,
        raw: &RawInputs<T>,
        label: usize,
        dropout_seed: Option<u64>,
    ) -> Result<SampleGradients<T>> {
        let mut g = Graph::new();
        let dropout = dropout_seed.map(|s| Dropout::new(self.config.dropout, s));
        let mut ctx = Ctx::new(&mut g, &self.store, true).with_dropout(dropout);
        let out = self.forward(&mut ctx, raw)?;
        let predicted = AnswerDistribution::from_logits(ctx.value(out.logits).to_f64_vec()).predicted();
        let loss = qa_loss(&mut ctx, out.logits, label)?;
        let vars = ctx.param_vars().to_vec();
        let value = ctx.value(loss).data()[0].to_f64_lossy();
        let mut grads = g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(self.store.tensors())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.dims())))
            .collect();
        Ok(SampleGradients {
            loss: value,
            predicted,
            grads,
        })
    }

    /// Parameters as container records.
    pub fn checkpoint(&self) -> NamedTensors {
        named(self.store.iter())
    }

    /// Replaces every parameter with the same-named record, converting
    /// precision if needed.
    pub fn load_checkpoint(&mut self, records: &[(String, StoredTensor)]) -> Result<()> {
        self.store
            .load(records.iter().map(|(n, t)| (n.clone(), t.to::<T>())).collect())
    }
}

impl Model<f64> {
    /// Central-difference check of the loss gradient with respect to
    /// every parameter, without dropout.
    pub fn grad_check(&self, raw: &RawInputs<f64>, label: usize, h: f64) -> Result<GradCheckReport> {
        grad_check(
            |g, vars| {
                let mut ctx = Ctx::with_vars(g, vars.to_vec());
                let out = self.forward(&mut ctx, raw)?;
                qa_loss(&mut ctx, out.logits, label)
            },
            self.store.tensors(),
            h,
        )
    }
}

/// Every strategy, with and without fusion, as the gradient suite runs
/// them.
pub fn suite_variants(experts: usize, top_k: usize) -> Vec<(PoolingStrategy, bool)> {
    let strategies = [
        PoolingStrategy::Uniform,
        PoolingStrategy::TopK(top_k),
        PoolingStrategy::Gaussian(experts),
        PoolingStrategy::WeightedGaussian(experts),
        PoolingStrategy::WeightedGaussianDisjoint(experts),
        PoolingStrategy::GaussianExperts(experts),
    ];
    strategies
        .into_iter()
        .flat_map(|s| [(s, true), (s, false)])
        .collect()
}

/// Full-pipeline gradient checks on random inputs at `T = 4`, `D = 8`,
/// `E = 2`, `H = 2` and three classes, one report per variant.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut init = Init::new(seed);
    let raw = RawInputs {
        visual: Tensor::uniform(&[4, 6], 1.0, init.rng()),
        audio: Tensor::uniform(&[4, 5], 1.0, init.rng()),
        patches: Tensor::uniform(&[4, 2, 6], 1.0, init.rng()),
        sentence: Tensor::uniform(&[6], 1.0, init.rng()),
        words: Tensor::uniform(&[3, 6], 1.0, init.rng()),
    };
    suite_variants(2, 2)
        .into_iter()
        .enumerate()
        .map(|(i, (strategy, fusion))| {
            let config = ModelConfig {
                visual_dim: 6,
                audio_dim: 5,
                question_dim: 6,
                width: 8,
                heads: 2,
                classes: 3,
                dropout: 0.0,
                fusion,
                strategy,
                normalize_time: false,
                patch_residual: PatchResidual::ModalityMatched,
            };
            let model = Model::<f64>::new(config, seed.wrapping_add(i as u64))?;
            let label = if fusion { "fusion" } else { "no_fusion" };
            Ok((format!("{strategy} {label}"), model.grad_check(&raw, i % 3, 1e-5)?))
        })
        .collect()
}

/// Result of one forward and backward pass.
#[derive(Clone, Debug)]
pub struct SampleGradients<T> {
    pub loss: f64,
    pub predicted: usize,
    /// One tensor per parameter, in store order.
    pub grads: Vec<Tensor<T>>,
}
