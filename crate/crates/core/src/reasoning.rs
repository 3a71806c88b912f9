//! Question-guided reasoning over the pooled temporal features and answer
//! prediction.

use crate::attention::{multi_head_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::numerics::{lit, log_sum_exp, softmax_in_place, Real, Var};
use crate::params::{Ctx, Init, Linear, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct ReasoningParams {
    pub visual: AttentionParams,
    pub audio_visual: AttentionParams,
    /// `D -> C`
    pub classifier: Linear,
}

impl ReasoningParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        width: usize,
        heads: usize,
        classes: usize,
        init: &mut Init,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 answer classes, got {classes}")));
        }
        Ok(Self {
            visual: AttentionParams::init(store, "reasoning.ca_v", width, heads, init)?,
            audio_visual: AttentionParams::init(store, "reasoning.ca_va", width, heads, init)?,
            classifier: Linear::init(store, "reasoning.classifier", width, classes, init)?,
        })
    }
}

/// `Avg(x, y) + CA(q_s, [x; y], [x; y])` for two `[D]` vectors.
fn question_guided_pair<T: Real>(
    ctx: &mut Ctx<'_, T>,
    attn: &AttentionParams,
    sentence: Var,
    x: Var,
    y: Var,
) -> Result<Var> {
    let (dx, dy) = (ctx.graph.dims(x).to_vec(), ctx.graph.dims(y).to_vec());
    if dx.len() != 1 || dx != dy || ctx.graph.dims(sentence) != dx.as_slice() {
        return Err(Error::shape(
            "question_guided_pair",
            format!("q_s {:?}, inputs {dx:?} and {dy:?}", ctx.graph.dims(sentence)),
        ));
    }
    let sum = ctx.graph.add(x, y)?;
    let avg = ctx.graph.scale(sum, lit(0.5))?;
    let kv = ctx.graph.stack_rows(&[x, y])?;
    let att = multi_head_attention(ctx, attn, sentence, kv, kv)?.output;
    ctx.graph.add(avg, att)
}

/// Final visual feature from the two patch-stream summaries.
pub fn fuse_visual<T: Real>(
    ctx: &mut Ctx<'_, T>,
    params: &ReasoningParams,
    sentence: Var,
    patch_audio: Var,
    patch_visual: Var,
) -> Result<Var> {
    question_guided_pair(ctx, &params.visual, sentence, patch_audio, patch_visual)
}

/// Final audio-visual feature from the audio summary and the visual feature.
pub fn fuse_av<T: Real>(
    ctx: &mut Ctx<'_, T>,
    params: &ReasoningParams,
    sentence: Var,
    audio: Var,
    visual: Var,
) -> Result<Var> {
    question_guided_pair(ctx, &params.audio_visual, sentence, audio, visual)
}

/// Classifier logits for a fused feature.
pub fn logits<T: Real>(ctx: &mut Ctx<'_, T>, params: &ReasoningParams, fused: Var) -> Result<Var> {
    params.classifier.forward(ctx, fused)
}

/// Cross-entropy of the logits against `label`, in log-sum-exp form.
pub fn qa_loss<T: Real>(ctx: &mut Ctx<'_, T>, logits: Var, label: usize) -> Result<Var> {
    ctx.graph.cross_entropy(logits, label)
}

/// Probabilities over answer classes.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerDistribution {
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl AnswerDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let mut probs = logits.clone();
        softmax_in_place(&mut probs);
        Self { logits, probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the most probable class (lowest index on ties).
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    /// `-log P(label)` computed from the logits.
    pub fn loss(&self, label: usize) -> Result<f64> {
        if label >= self.logits.len() {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                self.logits.len()
            )));
        }
        Ok(log_sum_exp(&self.logits) - self.logits[label])
    }
}
