//! Question-aware fusion of the visual, audio and patch streams.
//!
//! Each modality is enriched with a residual sum of self-attention,
//! cross-attention to the other modality and cross-attention to the
//! word-level question features. Patch tokens are then refined frame by
//! frame against the fused stream of each modality.

use crate::attention::{multi_head_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, Var};
use crate::params::{Ctx, Init, Linear, ParamStore};

/// Pre-extracted features of one clip and its question, before projection.
#[derive(Clone, Debug, PartialEq)]
pub struct RawInputs<T> {
    /// `[T, Dv]` frame-level visual features.
    pub visual: Tensor<T>,
    /// `[T, Da]` segment-level audio features.
    pub audio: Tensor<T>,
    /// `[T, M', Dv]` merged patch tokens per frame.
    pub patches: Tensor<T>,
    /// `[Dq]` sentence-level question feature.
    pub sentence: Tensor<T>,
    /// `[N, Dq]` word-level question features.
    pub words: Tensor<T>,
}

impl<T: Real> RawInputs<T> {
    pub fn segments(&self) -> usize {
        self.visual.dims()[0]
    }

    pub fn cast<U: Real>(&self) -> RawInputs<U> {
        RawInputs {
            visual: self.visual.cast(),
            audio: self.audio.cast(),
            patches: self.patches.cast(),
            sentence: self.sentence.cast(),
            words: self.words.cast(),
        }
    }

    fn validate(&self) -> Result<()> {
        let t = self.visual.dims()[0];
        let ranks = (
            self.visual.rank(),
            self.audio.rank(),
            self.patches.rank(),
            self.sentence.rank(),
            self.words.rank(),
        );
        if ranks != (2, 2, 3, 1, 2) {
            return Err(Error::shape("project_inputs", format!("ranks {ranks:?}")));
        }
        if self.audio.dims()[0] != t || self.patches.dims()[0] != t {
            return Err(Error::shape(
                "project_inputs",
                format!(
                    "segment counts differ: visual {t}, audio {}, patches {}",
                    self.audio.dims()[0],
                    self.patches.dims()[0]
                ),
            ));
        }
        if self.words.dims()[1] != self.sentence.dims()[0] {
            return Err(Error::shape(
                "project_inputs",
                "sentence and word features differ in width",
            ));
        }
        Ok(())
    }
}

/// Projected modality streams, all of model width `D`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureSequence {
    /// `[T, D]`
    pub visual: Var,
    /// `[T, D]`
    pub audio: Var,
    /// `[T, M', D]`
    pub patches: Var,
}

/// Projected question features.
#[derive(Clone, Copy, Debug)]
pub struct QuestionFeatures {
    /// `[D]`
    pub sentence: Var,
    /// `[N, D]`
    pub words: Var,
}

/// Outputs of fusion and patch refinement, each `[T, D]`.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeatures {
    pub visual: Var,
    pub audio: Var,
    pub patch_visual: Var,
    pub patch_audio: Var,
}

/// Linear maps from raw feature widths to the model width.
#[derive(Clone, Copy, Debug)]
pub struct InputProjection {
    pub visual: Linear,
    pub audio: Linear,
    pub patch: Linear,
    pub question: Linear,
}

impl InputProjection {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        visual_dim: usize,
        audio_dim: usize,
        question_dim: usize,
        width: usize,
        init: &mut Init,
    ) -> Result<Self> {
        Ok(Self {
            visual: Linear::init(store, "input.visual", visual_dim, width, init)?,
            audio: Linear::init(store, "input.audio", audio_dim, width, init)?,
            patch: Linear::init(store, "input.patch", visual_dim, width, init)?,
            question: Linear::init(store, "input.question", question_dim, width, init)?,
        })
    }
}

/// Maps every raw stream to the common model width.
pub fn project_inputs<T: Real>(
    ctx: &mut Ctx<'_, T>,
    proj: &InputProjection,
    raw: &RawInputs<T>,
) -> Result<(FeatureSequence, QuestionFeatures)> {
    raw.validate()?;
    let v = ctx.constant(raw.visual.clone());
    let a = ctx.constant(raw.audio.clone());
    let p = ctx.constant(raw.patches.clone());
    let s = ctx.constant(raw.sentence.clone());
    let w = ctx.constant(raw.words.clone());
    let features = FeatureSequence {
        visual: proj.visual.forward(ctx, v)?,
        audio: proj.audio.forward(ctx, a)?,
        patches: proj.patch.forward(ctx, p)?,
    };
    let question = QuestionFeatures {
        sentence: proj.question.forward(ctx, s)?,
        words: proj.question.forward(ctx, w)?,
    };
    Ok((features, question))
}

/// Attention parameters for both fusion stages. The patch self-attention
/// term is the same expression in both patch streams, so it is computed
/// once; everything else is separate.
#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    pub self_visual: AttentionParams,
    pub visual_to_audio: AttentionParams,
    pub visual_to_question: AttentionParams,
    pub self_audio: AttentionParams,
    pub audio_to_visual: AttentionParams,
    pub audio_to_question: AttentionParams,
    pub patch_self: AttentionParams,
    pub patch_cross_visual: AttentionParams,
    pub patch_cross_audio: AttentionParams,
}

impl FusionParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        width: usize,
        heads: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let mut attn = |name: &str| AttentionParams::init(store, &format!("fusion.{name}"), width, heads, init);
        Ok(Self {
            self_visual: attn("sa_v")?,
            visual_to_audio: attn("ca_va")?,
            visual_to_question: attn("ca_vq")?,
            self_audio: attn("sa_a")?,
            audio_to_visual: attn("ca_av")?,
            audio_to_question: attn("ca_aq")?,
            patch_self: attn("sa_p")?,
            patch_cross_visual: attn("ca_pv")?,
            patch_cross_audio: attn("ca_pa")?,
        })
    }

    pub fn all(&self) -> [&AttentionParams; 9] {
        [
            &self.self_visual,
            &self.visual_to_audio,
            &self.visual_to_question,
            &self.self_audio,
            &self.audio_to_visual,
            &self.audio_to_question,
            &self.patch_self,
            &self.patch_cross_visual,
            &self.patch_cross_audio,
        ]
    }
}

/// Question-aware visual and audio streams:
/// `v_q = v + SA(v) + CA(v, a) + CA(v, q_w)` and symmetrically for audio.
pub fn fuse_modalities<T: Real>(
    ctx: &mut Ctx<'_, T>,
    feat: &FeatureSequence,
    q: &QuestionFeatures,
    params: &FusionParams,
) -> Result<(Var, Var)> {
    let v = residual_fusion(
        ctx,
        feat.visual,
        feat.audio,
        q.words,
        &params.self_visual,
        &params.visual_to_audio,
        &params.visual_to_question,
    )?;
    let a = residual_fusion(
        ctx,
        feat.audio,
        feat.visual,
        q.words,
        &params.self_audio,
        &params.audio_to_visual,
        &params.audio_to_question,
    )?;
    Ok((v, a))
}

fn residual_fusion<T: Real>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    other: Var,
    words: Var,
    sa: &AttentionParams,
    ca_other: &AttentionParams,
    ca_words: &AttentionParams,
) -> Result<Var> {
    let s = multi_head_attention(ctx, sa, x, x, x)?.output;
    let c1 = multi_head_attention(ctx, ca_other, x, other, other)?.output;
    let c2 = multi_head_attention(ctx, ca_words, x, words, words)?.output;
    let y = ctx.graph.add(x, s)?;
    let y = ctx.graph.add(y, c1)?;
    ctx.graph.add(y, c2)
}

/// Frame-wise patch refinement.
///
/// For frame `t`, self-attention runs over that frame's `M'` patch tokens
/// and is averaged over the tokens; cross-attention uses the fused row
/// `v_q[t]` (resp. `a_q[t]`) as a single query over the same tokens. The
/// residual term is the frame's patch mean, so each output is `[T, D]`.
pub fn refine_patches<T: Real>(
    ctx: &mut Ctx<'_, T>,
    feat: &FeatureSequence,
    visual_q: Var,
    audio_q: Var,
    params: &FusionParams,
) -> Result<(Var, Var)> {
    let dims = ctx.graph.dims(feat.patches).to_vec();
    if dims.len() != 3 {
        return Err(Error::shape("refine_patches", format!("patches {dims:?}")));
    }
    let (t, d) = (dims[0], dims[2]);
    // shared part: per-frame patch mean plus the token-averaged self-attention
    let patch_mean = ctx.graph.mean_axis(feat.patches)?;
    let s = multi_head_attention(ctx, &params.patch_self, feat.patches, feat.patches, feat.patches)?.output;
    let s = ctx.graph.mean_axis(s)?;
    let base = ctx.graph.add(patch_mean, s)?;
    let mut guided = |guide: Var, ca: &AttentionParams| -> Result<Var> {
        if ctx.graph.dims(guide) != [t, d] {
            return Err(Error::shape(
                "refine_patches",
                format!("guide {:?} vs patches {dims:?}", ctx.graph.dims(guide)),
            ));
        }
        let q = ctx.graph.reshape(guide, &[t, 1, d])?;
        let c = multi_head_attention(ctx, ca, q, feat.patches, feat.patches)?.output;
        let c = ctx.graph.reshape(c, &[t, d])?;
        ctx.graph.add(base, c)
    };
    let pv = guided(visual_q, &params.patch_cross_visual)?;
    let pa = guided(audio_q, &params.patch_cross_audio)?;
    Ok((pv, pa))
}
