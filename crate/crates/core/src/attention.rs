//! Multi-head scaled dot-product attention.
//!
//! Used as self-attention (query = key = value) and as cross-attention
//! (query from one stream, key/value from another). There is no layer
//! normalization, feed-forward sublayer, masking or positional encoding.

use crate::error::{Error, Result};
use crate::numerics::{lit, Real, Var};
use crate::params::{Ctx, Init, ParamId, ParamStore};

/// Projection matrices of one attention call site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub width: usize,
    pub heads: usize,
}

impl AttentionParams {
    /// Registers `{name}.{wq,wk,wv,wo}`, each `width x width`, uniform in
    /// `[-1/sqrt(width), 1/sqrt(width)]`.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        init: &mut Init,
    ) -> Result<Self> {
        if heads == 0 || width == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {width} is not divisible by {heads} heads"
            )));
        }
        let mut mat = |suffix: &str| store.add(format!("{name}.{suffix}"), init.uniform(&[width, width], width));
        Ok(Self {
            query: mat("wq")?,
            key: mat("wk")?,
            value: mat("wv")?,
            output: mat("wo")?,
            width,
            heads,
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

/// Creates a standalone parameter set for one attention block.
pub fn init_attention_params<T: Real>(
    width: usize,
    heads: usize,
    seed: u64,
) -> Result<(ParamStore<T>, AttentionParams)> {
    let mut store = ParamStore::new();
    let params = AttentionParams::init(&mut store, "attn", width, heads, &mut Init::new(seed))?;
    Ok((store, params))
}

/// Result of [`multi_head_attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// Same shape as the query.
    pub output: Var,
    /// `[B*H, S, L]` attention probabilities (after dropout when active).
    pub weights: Var,
}

/// Attention of `query` over `key`/`value` rows.
///
/// Accepted layouts: `[D]` query with `[L, D]` keys (returns `[D]`),
/// `[S, D]` with `[L, D]`, and batched `[B, S, D]` with `[B, L, D]`.
pub fn multi_head_attention<T: Real>(
    ctx: &mut Ctx<'_, T>,
    params: &AttentionParams,
    query: Var,
    key: Var,
    value: Var,
) -> Result<AttentionOutput> {
    let qdims = ctx.graph.dims(query).to_vec();
    let kdims = ctx.graph.dims(key).to_vec();
    if ctx.graph.dims(value) != kdims.as_slice() {
        return Err(Error::shape(
            "attention",
            format!("key {kdims:?} vs value {:?}", ctx.graph.dims(value)),
        ));
    }
    let d = params.width;
    let (b, s, l) = match (qdims.as_slice(), kdims.as_slice()) {
        ([dq], [l, dk]) if *dq == d && *dk == d => (1, 1, *l),
        ([s, dq], [l, dk]) if *dq == d && *dk == d => (1, *s, *l),
        ([b, s, dq], [bk, l, dk]) if b == bk && *dq == d && *dk == d => (*b, *s, *l),
        _ => {
            return Err(Error::shape(
                "attention",
                format!("query {qdims:?}, key {kdims:?}, width {d}"),
            ))
        }
    };
    let h = params.heads;
    let dh = params.head_width();

    let q = project_heads(ctx, query, params.query, b, s, h)?;
    let k = project_heads(ctx, key, params.key, b, l, h)?;
    let v = project_heads(ctx, value, params.value, b, l, h)?;

    let scores = ctx.graph.matmul_t(q, k, false, true)?;
    let scores = ctx.graph.scale(scores, T::one() / lit::<T>(dh as f64).sqrt())?;
    let weights = ctx.graph.softmax(scores)?;
    let weights = ctx.dropout(weights)?;

    let heads_out = ctx.graph.matmul(weights, v)?;
    let merged = ctx.graph.merge_heads(heads_out, h)?;
    let flat = ctx.graph.reshape(merged, &[b * s, d])?;
    let out = ctx.graph.matmul(flat, ctx.p(params.output))?;
    let output = ctx.graph.reshape(out, &qdims)?;
    Ok(AttentionOutput { output, weights })
}

fn project_heads<T: Real>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    weight: ParamId,
    batch: usize,
    rows: usize,
    heads: usize,
) -> Result<Var> {
    let d = ctx.graph.value(ctx.p(weight)).dims()[0];
    let flat = ctx.graph.reshape(x, &[batch * rows, d])?;
    let projected = ctx.graph.matmul(flat, ctx.p(weight))?;
    let shaped = ctx.graph.reshape(projected, &[batch, rows, d])?;
    ctx.graph.split_heads(shaped, heads)
}
