//! Gaussian temporal experts.
//!
//! A question-pooled summary of each modality drives two small heads: a
//! generator that places `E` Gaussian soft masks on normalized time, and a
//! router that weights them. Each expert applies its own affine map to the
//! frames, and the masked, routed expert outputs are summed over time and
//! experts.
//!
//! Centers start at the midpoints of `E` equal segments and may only move
//! within half a segment of their start (`margin = 1 / (2E)`), so adjacent
//! centers can never meet.

use crate::attention::{multi_head_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::fusion::FusedFeatures;
use crate::numerics::{lit, Real, Tensor, Var};
use crate::params::{Ctx, Init, Linear, ParamId, ParamStore};

/// Smallest Gaussian width; `sigmoid` may underflow below it.
pub const MIN_WIDTH: f64 = 1e-4;

/// Evenly spaced initial centers and the half-gap between them.
///
/// Returns `(margin, centers)` with `margin = 1/(2E)` and
/// `centers[i] = (2i + 1) / (2E)`, the midpoints of `E` equal segments.
/// Each center is one correctly rounded division, so it is the closest
/// double to its exact value.
pub fn init_fixed_centers(experts: usize) -> Result<(f64, Vec<f64>)> {
    if experts == 0 {
        return Err(Error::Config("expert count must be at least 1".into()));
    }
    let two_e = 2.0 * experts as f64;
    Ok((
        1.0 / two_e,
        (0..experts).map(|i| (2 * i + 1) as f64 / two_e).collect(),
    ))
}

/// How generated offsets move the centers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterMode {
    /// `u_fixed + tanh(offset) * margin`: each center stays in its own window.
    Disjoint,
    /// `sigmoid(logit(u_fixed) + offset)`: centers roam all of `(0, 1)` and
    /// may cross.
    Free,
}

/// Which fused stream is added to `p_a` before integration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PatchResidual {
    /// `p_v += v_q`, `p_a += a_q`.
    #[default]
    ModalityMatched,
    /// `p_v += v_q`, `p_a += v_q`.
    VisualOnly,
}

impl std::fmt::Display for PatchResidual {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PatchResidual::ModalityMatched => "modality_matched",
            PatchResidual::VisualOnly => "visual_only",
        })
    }
}

impl std::str::FromStr for PatchResidual {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modality_matched" => Ok(PatchResidual::ModalityMatched),
            "visual_only" => Ok(PatchResidual::VisualOnly),
            _ => Err(Error::Config(format!(
                "patch residual must be modality_matched or visual_only, got {s:?}"
            ))),
        }
    }
}

/// Linear head mapping a pooled vector to per-expert center offsets and
/// width logits.
#[derive(Clone, Debug)]
pub struct GaussianGeneratorParams {
    /// `D -> 2E`: the first `E` outputs are offsets, the last `E` widths.
    pub linear: Linear,
    pub fixed_centers: Vec<f64>,
    pub margin: f64,
}

impl GaussianGeneratorParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        experts: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let (margin, fixed_centers) = init_fixed_centers(experts)?;
        Ok(Self {
            linear: Linear::init(store, name, width, 2 * experts, init)?,
            fixed_centers,
            margin,
        })
    }

    pub fn experts(&self) -> usize {
        self.fixed_centers.len()
    }
}

/// `E` affine maps `D -> D`, applied frame by frame.
#[derive(Clone, Copy, Debug)]
pub struct ExpertBank {
    /// `[E, D, D]`
    pub weight: ParamId,
    /// `[E, D]`
    pub bias: ParamId,
}

impl ExpertBank {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        experts: usize,
        init: &mut Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), init.uniform(&[experts, width, width], width))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[experts, width]))?,
        })
    }
}

/// Graph handles of generated curves.
#[derive(Clone, Copy, Debug)]
pub struct GaussianCurves {
    /// `[E]`
    pub centers: Var,
    /// `[E]`
    pub widths: Var,
    /// `[E, T]`, every row peaking at exactly one.
    pub curves: Var,
}

/// Snapshot of one modality's mixture, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixtureState {
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
    /// `curves[i][t]`
    pub curves: Vec<Vec<f64>>,
    pub routing: Vec<f64>,
}

impl GaussianMixtureState {
    pub fn capture<T: Real>(ctx: &Ctx<'_, T>, curves: &GaussianCurves, routing: Option<Var>) -> Self {
        let c = ctx.value(curves.curves);
        let e = c.dims()[0];
        let routing = match routing {
            Some(r) => ctx.value(r).to_f64_vec(),
            None => vec![1.0; e],
        };
        Self {
            centers: ctx.value(curves.centers).to_f64_vec(),
            widths: ctx.value(curves.widths).to_f64_vec(),
            curves: (0..e).map(|i| c.row(i).iter().map(|x| x.to_f64_lossy()).collect()).collect(),
            routing,
        }
    }

    pub fn experts(&self) -> usize {
        self.centers.len()
    }

    pub fn steps(&self) -> usize {
        self.curves.first().map_or(0, Vec::len)
    }

    /// `sum_i r_i g[i, t]` for every `t`.
    pub fn integrated(&self) -> Vec<f64> {
        (0..self.steps())
            .map(|t| {
                self.routing
                    .iter()
                    .zip(&self.curves)
                    .map(|(r, g)| r * g[t])
                    .sum()
            })
            .collect()
    }
}

/// Cross-attention of the sentence feature over `[T, D]` rows, returning a
/// single `[D]` summary.
pub fn pool_by_question<T: Real>(
    ctx: &mut Ctx<'_, T>,
    attn: &AttentionParams,
    sentence: Var,
    x: Var,
) -> Result<Var> {
    if ctx.graph.dims(x).len() != 2 {
        return Err(Error::shape("pool_by_question", format!("{:?}", ctx.graph.dims(x))));
    }
    Ok(multi_head_attention(ctx, attn, sentence, x, x)?.output)
}

/// Centers, widths and peak-normalized curves sampled at `steps` segment
/// midpoints.
pub fn generate_gaussians<T: Real>(
    ctx: &mut Ctx<'_, T>,
    pooled: Var,
    gen: &GaussianGeneratorParams,
    steps: usize,
    mode: CenterMode,
) -> Result<GaussianCurves> {
    if steps == 0 {
        return Err(Error::shape("generate_gaussians", "no segments"));
    }
    let e = gen.experts();
    let raw = gen.linear.forward(ctx, pooled)?;
    let offsets: Vec<usize> = (0..e).collect();
    let widths: Vec<usize> = (e..2 * e).collect();
    let offset = ctx.graph.gather_rows(raw, &offsets)?;
    let width_logit = ctx.graph.gather_rows(raw, &widths)?;

    let centers = match mode {
        CenterMode::Disjoint => {
            let t = ctx.graph.tanh(offset)?;
            let shift = ctx.graph.scale(t, lit(gen.margin))?;
            let base = ctx.constant(Tensor::from_f64(&[e], &gen.fixed_centers)?);
            ctx.graph.add(base, shift)?
        }
        CenterMode::Free => {
            let logits: Vec<f64> = gen
                .fixed_centers
                .iter()
                .map(|u| (u / (1.0 - u)).ln())
                .collect();
            let base = ctx.constant(Tensor::from_f64(&[e], &logits)?);
            let z = ctx.graph.add(base, offset)?;
            ctx.graph.sigmoid(z)?
        }
    };
    let widths = ctx.graph.sigmoid(width_logit)?;
    let widths = ctx.graph.clamp_min(widths, lit(MIN_WIDTH))?;
    let curves = ctx.graph.gaussian_curves(centers, widths, steps)?;
    Ok(GaussianCurves {
        centers,
        widths,
        curves,
    })
}

/// `softmax(pooled · W)` over experts.
pub fn route<T: Real>(ctx: &mut Ctx<'_, T>, pooled: Var, router: ParamId) -> Result<Var> {
    let w = ctx.p(router);
    let [d, e] = ctx.graph.dims(w)[..] else {
        return Err(Error::shape("route", "router must be a matrix"));
    };
    if ctx.graph.dims(pooled) != [d] {
        return Err(Error::shape(
            "route",
            format!("pooled {:?} vs router {d}x{e}", ctx.graph.dims(pooled)),
        ));
    }
    let row = ctx.graph.reshape(pooled, &[1, d])?;
    let logits = ctx.graph.matmul(row, w)?;
    let logits = ctx.graph.reshape(logits, &[e])?;
    ctx.graph.softmax(logits)
}

/// `sum_i r_i sum_t g[i, t] E_i(x[t])`.
///
/// Without a bank the experts are identities; without routing every expert
/// has weight one. Since the experts are affine, the time sum is taken
/// before the expert map: `E_i` is applied to `sum_t g[i,t] x[t]` and the
/// bias is scaled by `sum_t g[i,t]`.
pub fn integrate<T: Real>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    curves: Var,
    routing: Option<Var>,
    bank: Option<&ExpertBank>,
    normalize_time: bool,
) -> Result<Var> {
    let [t, d] = ctx.graph.dims(x)[..] else {
        return Err(Error::shape("integrate", format!("x {:?}", ctx.graph.dims(x))));
    };
    let [e, tc] = ctx.graph.dims(curves)[..] else {
        return Err(Error::shape("integrate", "curves must be a matrix"));
    };
    if tc != t {
        return Err(Error::shape("integrate", format!("curves over {tc} steps, x has {t}")));
    }
    if let Some(r) = routing {
        if ctx.graph.dims(r) != [e] {
            return Err(Error::shape("integrate", format!("routing {:?}", ctx.graph.dims(r))));
        }
    }
    let g = if normalize_time {
        ctx.graph.row_normalize(curves)?
    } else {
        curves
    };
    let weights = match routing {
        Some(r) => r,
        None => ctx.constant(Tensor::filled(&[e], T::one())),
    };
    let weights_row = ctx.graph.reshape(weights, &[1, e])?;

    // [E, D] masked time sums
    let masked = ctx.graph.matmul(g, x)?;
    let mixed = match bank {
        None => ctx.graph.matmul(weights_row, masked)?,
        Some(bank) => {
            let w = ctx.p(bank.weight);
            if ctx.graph.dims(w) != [e, d, d] {
                return Err(Error::shape(
                    "integrate",
                    format!("bank {:?} for {e} experts of width {d}", ctx.graph.dims(w)),
                ));
            }
            let m3 = ctx.graph.reshape(masked, &[e, 1, d])?;
            let mapped = ctx.graph.matmul(m3, w)?;
            let mapped = ctx.graph.reshape(mapped, &[e, d])?;
            let main = ctx.graph.matmul(weights_row, mapped)?;

            let ones = ctx.constant(Tensor::filled(&[t, 1], T::one()));
            let mass = ctx.graph.matmul(g, ones)?;
            let mass = ctx.graph.reshape(mass, &[e])?;
            let scaled = ctx.graph.mul(weights, mass)?;
            let scaled = ctx.graph.reshape(scaled, &[1, e])?;
            let bias = ctx.graph.matmul(scaled, ctx.p(bank.bias))?;
            ctx.graph.add(main, bias)?
        }
    };
    ctx.graph.reshape(mixed, &[d])
}

/// Everything the temporal stage learns.
#[derive(Clone, Debug)]
pub struct TemporalParams {
    pub pool_visual: AttentionParams,
    pub pool_audio: AttentionParams,
    /// Shared by both modalities.
    pub generator: GaussianGeneratorParams,
    /// `[D, E]`, shared by both modalities.
    pub router: ParamId,
    /// Present only when the experts themselves are learned.
    pub bank_visual: Option<ExpertBank>,
    pub bank_audio: Option<ExpertBank>,
}

impl TemporalParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        width: usize,
        heads: usize,
        experts: usize,
        with_banks: bool,
        init: &mut Init,
    ) -> Result<Self> {
        let mut bank = |name: &str| -> Result<Option<ExpertBank>> {
            with_banks
                .then(|| ExpertBank::init(store, name, width, experts, init))
                .transpose()
        };
        let bank_visual = bank("temporal.experts_v")?;
        let bank_audio = bank("temporal.experts_a")?;
        Ok(Self {
            pool_visual: AttentionParams::init(store, "temporal.pool_v", width, heads, init)?,
            pool_audio: AttentionParams::init(store, "temporal.pool_a", width, heads, init)?,
            generator: GaussianGeneratorParams::init(store, "temporal.generator", width, experts, init)?,
            router: store.add("temporal.router", init.uniform(&[width, experts], width))?,
            bank_visual,
            bank_audio,
        })
    }
}

/// Options of the temporal stage that are not learned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalOptions {
    pub centers: CenterMode,
    pub routed: bool,
    pub experts: bool,
    pub normalize_time: bool,
}

impl Default for TemporalOptions {
    fn default() -> Self {
        Self {
            centers: CenterMode::Disjoint,
            routed: true,
            experts: true,
            normalize_time: false,
        }
    }
}

/// Pooled outputs of the temporal stage and the mixtures that produced
/// them.
#[derive(Clone, Debug)]
pub struct TemporalOutput {
    /// `[D]` from the visual-refined patch stream.
    pub patch_visual: Var,
    /// `[D]` from the audio-refined patch stream.
    pub patch_audio: Var,
    /// `[D]` from the fused audio stream.
    pub audio: Var,
    pub visual_curves: Option<GaussianCurves>,
    pub audio_curves: Option<GaussianCurves>,
    pub visual_state: Option<GaussianMixtureState>,
    pub audio_state: Option<GaussianMixtureState>,
}

/// Adds the fused frame streams to the refined patch streams.
pub fn patch_streams<T: Real>(
    ctx: &mut Ctx<'_, T>,
    fused: &FusedFeatures,
    residual: PatchResidual,
) -> Result<(Var, Var)> {
    let pv = ctx.graph.add(fused.visual, fused.patch_visual)?;
    let audio_guide = match residual {
        PatchResidual::ModalityMatched => fused.audio,
        PatchResidual::VisualOnly => fused.visual,
    };
    let pa = ctx.graph.add(audio_guide, fused.patch_audio)?;
    Ok((pv, pa))
}

/// The full temporal stage for both modalities.
///
/// The visual mixture weights both patch streams; the audio mixture weights
/// the fused audio stream.
pub fn temporal_integration<T: Real>(
    ctx: &mut Ctx<'_, T>,
    fused: &FusedFeatures,
    sentence: Var,
    params: &TemporalParams,
    options: TemporalOptions,
    residual: PatchResidual,
) -> Result<TemporalOutput> {
    let steps = ctx.graph.dims(fused.visual)[0];

    let pooled_v = pool_by_question(ctx, &params.pool_visual, sentence, fused.visual)?;
    let curves_v = generate_gaussians(ctx, pooled_v, &params.generator, steps, options.centers)?;
    let route_v = if options.routed {
        Some(route(ctx, pooled_v, params.router)?)
    } else {
        None
    };

    let pooled_a = pool_by_question(ctx, &params.pool_audio, sentence, fused.audio)?;
    let curves_a = generate_gaussians(ctx, pooled_a, &params.generator, steps, options.centers)?;
    let route_a = if options.routed {
        Some(route(ctx, pooled_a, params.router)?)
    } else {
        None
    };

    let (pv, pa) = patch_streams(ctx, fused, residual)?;
    let (bank_v, bank_a) = if options.experts {
        match (&params.bank_visual, &params.bank_audio) {
            (Some(v), Some(a)) => (Some(v), Some(a)),
            _ => return Err(Error::Config("expert banks were not initialized".into())),
        }
    } else {
        (None, None)
    };
    let n = options.normalize_time;
    let patch_visual = integrate(ctx, pv, curves_v.curves, route_v, bank_v, n)?;
    let patch_audio = integrate(ctx, pa, curves_v.curves, route_v, bank_v, n)?;
    let audio = integrate(ctx, fused.audio, curves_a.curves, route_a, bank_a, n)?;

    Ok(TemporalOutput {
        patch_visual,
        patch_audio,
        audio,
        visual_curves: Some(curves_v),
        audio_curves: Some(curves_a),
        visual_state: Some(GaussianMixtureState::capture(ctx, &curves_v, route_v)),
        audio_state: Some(GaussianMixtureState::capture(ctx, &curves_a, route_a)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Graph};

    #[test]
    fn fixed_centers_closed_form() {
        let (m, c) = init_fixed_centers(2).unwrap();
        assert_eq!(m, 0.25);
        assert_eq!(c, vec![0.25, 0.75]);
        let (m, c) = init_fixed_centers(1).unwrap();
        assert_eq!((m, c), (0.5, vec![0.5]));
        assert!(init_fixed_centers(0).is_err());
    }

    #[test]
    fn fixed_centers_seven() {
        let (m, c) = init_fixed_centers(7).unwrap();
        assert_eq!(m, 1.0 / 14.0);
        let want: Vec<f64> = (0..7).map(|i| (2 * i + 1) as f64 / 14.0).collect();
        assert_eq!(c, want);
    }

    fn generator(store: &mut ParamStore<f64>, d: usize, e: usize) -> GaussianGeneratorParams {
        GaussianGeneratorParams::init(store, "gen", d, e, &mut Init::new(3)).unwrap()
    }

    #[test]
    fn zero_generator_output_gives_fixed_centers_and_half_width() {
        let mut store = ParamStore::new();
        let gen = generator(&mut store, 3, 2);
        store.set(gen.linear.weight, Tensor::zeros(&[3, 4])).unwrap();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, false);
        let pooled = ctx.constant(Tensor::vector(vec![0.4, -1.0, 2.0]));
        let c = generate_gaussians(&mut ctx, pooled, &gen, 4, CenterMode::Disjoint).unwrap();
        assert_eq!(ctx.value(c.centers).data(), &[0.25, 0.75]);
        assert_eq!(ctx.value(c.widths).data(), &[0.5, 0.5]);

        // direct evaluation at midpoints 1/8, 3/8, 5/8, 7/8
        let curves = ctx.value(c.curves);
        for (i, mu) in [0.25f64, 0.75].into_iter().enumerate() {
            let raw: Vec<f64> = (0..4)
                .map(|t| {
                    let x = (t as f64 + 0.5) / 4.0;
                    (-(x - mu).powi(2) / (2.0 * 0.25)).exp()
                })
                .collect();
            let max = raw.iter().copied().fold(f64::MIN, f64::max);
            for (t, r) in raw.iter().enumerate() {
                assert!((curves.get2(i, t) - r / max).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn routing_examples() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::zeros(&[3, 4])).unwrap();
        let w2 = store
            .add("w2", Tensor::from_f64(&[1, 2], &[2f64.ln(), 0.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, false);
        let pooled = ctx.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let r = route(&mut ctx, pooled, w).unwrap();
        assert_eq!(ctx.value(r).data(), &[0.25; 4]);
        let one = ctx.constant(Tensor::vector(vec![1.0]));
        let r = route(&mut ctx, one, w2).unwrap();
        let got = ctx.value(r).data();
        assert!((got[0] - 2.0 / 3.0).abs() < 1e-15 && (got[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_frame_single_identity_expert() {
        let mut store = ParamStore::<f64>::new();
        let bank = ExpertBank::init(&mut store, "bank", 3, 1, &mut Init::new(0)).unwrap();
        store
            .set(bank.weight, Tensor::identity(3).reshape(&[1, 3, 3]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, false);
        let x = ctx.constant(Tensor::from_f64(&[1, 3], &[0.5, -2.0, 4.0]).unwrap());
        let mu = ctx.constant(Tensor::vector(vec![0.5]));
        let sigma = ctx.constant(Tensor::vector(vec![0.3]));
        let curves = ctx.graph.gaussian_curves(mu, sigma, 1).unwrap();
        let r = ctx.constant(Tensor::vector(vec![1.0]));
        let out = integrate(&mut ctx, x, curves, Some(r), Some(&bank), false).unwrap();
        assert_eq!(ctx.value(out).data(), &[0.5, -2.0, 4.0]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut store = ParamStore::<f64>::new();
        let bank = ExpertBank::init(&mut store, "bank", 2, 3, &mut Init::new(0)).unwrap();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, false);
        let x = ctx.constant(Tensor::zeros(&[5, 2]));
        let curves = ctx.constant(Tensor::filled(&[3, 5], 0.7));
        let r = ctx.constant(Tensor::vector(vec![0.2, 0.3, 0.5]));
        let out = integrate(&mut ctx, x, curves, Some(r), Some(&bank), false).unwrap();
        assert_eq!(ctx.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn integrate_matches_triple_loop() {
        // T=2, D=2, E=2 with integer weights.
        let w = [[[1.0, 2.0], [0.0, -1.0]], [[3.0, 0.0], [1.0, 1.0]]];
        let b = [[1.0, 0.0], [-2.0, 1.0]];
        let x = [[1.0, 2.0], [-1.0, 3.0]];
        let gc = [[1.0, 0.5], [0.25, 1.0]];
        let r = [0.75, 0.25];
        let mut want = [0.0; 2];
        for i in 0..2 {
            for t in 0..2 {
                for o in 0..2 {
                    let e: f64 = (0..2).map(|k| x[t][k] * w[i][k][o]).sum::<f64>() + b[i][o];
                    want[o] += r[i] * gc[i][t] * e;
                }
            }
        }

        let mut store = ParamStore::<f64>::new();
        let bank = ExpertBank::init(&mut store, "bank", 2, 2, &mut Init::new(0)).unwrap();
        let flat: Vec<f64> = w.iter().flatten().flatten().copied().collect();
        store.set(bank.weight, Tensor::from_f64(&[2, 2, 2], &flat).unwrap()).unwrap();
        store.set(bank.bias, Tensor::from_f64(&[2, 2], &b.concat()).unwrap()).unwrap();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, false);
        let xv = ctx.constant(Tensor::from_f64(&[2, 2], &x.concat()).unwrap());
        let gv = ctx.constant(Tensor::from_f64(&[2, 2], &gc.concat()).unwrap());
        let rv = ctx.constant(Tensor::vector(r.to_vec()));
        let out = integrate(&mut ctx, xv, gv, Some(rv), Some(&bank), false).unwrap();
        let got = ctx.value(out).data();
        assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn time_normalization_divides_by_mass() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, false);
        let x = ctx.constant(Tensor::from_f64(&[2, 1], &[2.0, 4.0]).unwrap());
        let curves = ctx.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let raw = integrate(&mut ctx, x, curves, None, None, false).unwrap();
        let norm = integrate(&mut ctx, x, curves, None, None, true).unwrap();
        assert_eq!(ctx.value(raw).data(), &[6.0]);
        assert_eq!(ctx.value(norm).data(), &[3.0]);
    }

    #[test]
    fn generator_gradient_check() {
        let mut store = ParamStore::new();
        let gen = generator(&mut store, 3, 3);
        let router = store
            .add("router", Init::new(9).uniform(&[3, 3], 3))
            .unwrap();
        let bank = ExpertBank::init(&mut store, "bank", 3, 3, &mut Init::new(4)).unwrap();
        let x = Tensor::<f64>::uniform(&[5, 3], 1.0, Init::new(1).rng());
        for mode in [CenterMode::Disjoint, CenterMode::Free] {
            for normalize in [false, true] {
                let r = grad_check(
                    |g, vars| {
                        let mut ctx = Ctx::with_vars(g, vars.to_vec());
                        let pooled = ctx.constant(Tensor::vector(vec![0.3, -0.8, 1.1]));
                        let c = generate_gaussians(&mut ctx, pooled, &gen, 5, mode)?;
                        let r = route(&mut ctx, pooled, router)?;
                        let xv = ctx.constant(x.clone());
                        let out = integrate(&mut ctx, xv, c.curves, Some(r), Some(&bank), normalize)?;
                        let sq = ctx.graph.mul(out, out)?;
                        ctx.graph.sum(sq)
                    },
                    store.tensors(),
                    1e-5,
                )
                .unwrap();
                assert!(r.max_rel_error < 1e-6, "{mode:?} {normalize}: {r:?}");
            }
        }
    }
}
