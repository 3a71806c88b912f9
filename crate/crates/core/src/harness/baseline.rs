use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::experts::{
    generate_gaussians, integrate, pool_by_question, route, CenterMode, TemporalOptions,
    TemporalParams,
};
use crate::numerics::{Real, Var};
use crate::params::Ctx;

/// How the temporal axis is collapsed to a single vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolingStrategy {
    /// Mean over all frames.
    Uniform,
    /// Mean of the `K` frames most cosine-similar to the sentence feature.
    TopK(usize),
    /// Plain sum of `E` Gaussian masks with unconstrained centers.
    Gaussian(usize),
    /// Routed sum of `E` masks with unconstrained centers.
    WeightedGaussian(usize),
    /// Routed sum of `E` masks with margin-bounded centers.
    WeightedGaussianDisjoint(usize),
    /// Routed, margin-bounded masks over per-expert affine maps.
    GaussianExperts(usize),
}

impl PoolingStrategy {
    /// Gaussian count of the mask-based strategies.
    pub fn experts(&self) -> Option<usize> {
        match *self {
            Self::Uniform | Self::TopK(_) => None,
            Self::Gaussian(e)
            | Self::WeightedGaussian(e)
            | Self::WeightedGaussianDisjoint(e)
            | Self::GaussianExperts(e) => Some(e),
        }
    }

    /// Temporal-stage switches for the mask-based strategies.
    pub fn temporal_options(&self, normalize_time: bool) -> Option<TemporalOptions> {
        let (centers, routed, experts) = match self {
            Self::Uniform | Self::TopK(_) => return None,
            Self::Gaussian(_) => (CenterMode::Free, false, false),
            Self::WeightedGaussian(_) => (CenterMode::Free, true, false),
            Self::WeightedGaussianDisjoint(_) => (CenterMode::Disjoint, true, false),
            Self::GaussianExperts(_) => (CenterMode::Disjoint, true, true),
        };
        Some(TemporalOptions {
            centers,
            routed,
            experts,
            normalize_time,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::TopK(0) => Err(Error::Config("top_k needs K >= 1".into())),
            s if s.experts() == Some(0) => {
                Err(Error::Config(format!("{s} needs at least one Gaussian")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uniform => write!(f, "uniform"),
            Self::TopK(k) => write!(f, "top_k:{k}"),
            Self::Gaussian(e) => write!(f, "gaussian:{e}"),
            Self::WeightedGaussian(e) => write!(f, "weighted_gaussian:{e}"),
            Self::WeightedGaussianDisjoint(e) => write!(f, "weighted_gaussian_disjoint:{e}"),
            Self::GaussianExperts(e) => write!(f, "gaussian_experts:{e}"),
        }
    }
}

impl FromStr for PoolingStrategy {
    type Err = Error;

    /// Parses `uniform`, `top_k:K`, `gaussian:E`, `weighted_gaussian:E`,
    /// `weighted_gaussian_disjoint:E` or `gaussian_experts:E`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let count = || -> Result<usize> {
            arg.ok_or_else(|| Error::Config(format!("strategy {name:?} needs a count, e.g. {name}:7")))?
                .parse()
                .map_err(|_| Error::Config(format!("bad count in strategy {s:?}")))
        };
        let strategy = match name {
            "uniform" if arg.is_none() => Self::Uniform,
            "top_k" => Self::TopK(count()?),
            "gaussian" => Self::Gaussian(count()?),
            "weighted_gaussian" => Self::WeightedGaussian(count()?),
            "weighted_gaussian_disjoint" => Self::WeightedGaussianDisjoint(count()?),
            "gaussian_experts" => Self::GaussianExperts(count()?),
            _ => return Err(Error::Config(format!("unknown pooling strategy {s:?}"))),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

/// Indices of the `k` rows of `x` with the highest cosine similarity to
/// `query`, in ascending index order. Ties go to the earlier row.
pub fn top_k_indices<T: Real>(x: &[T], width: usize, query: &[T], k: usize) -> Vec<usize> {
    let qn = query.iter().map(|&v| v * v).sum::<T>().sqrt();
    let mut scored: Vec<(usize, f64)> = x
        .chunks(width)
        .enumerate()
        .map(|(i, row)| {
            let dot: T = row.iter().zip(query).map(|(&a, &b)| a * b).sum();
            let rn = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = (rn * qn).to_f64_lossy();
            let cos = if denom > 0.0 { dot.to_f64_lossy() / denom } else { 0.0 };
            (i, cos)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut picked: Vec<usize> = scored.into_iter().take(k).map(|(i, _)| i).collect();
    picked.sort_unstable();
    picked
}

/// Row indices of `x` sorted lexicographically by row contents.
pub fn canonical_row_order<T: Real>(x: &[T], width: usize) -> Vec<usize> {
    let rows: Vec<&[T]> = x.chunks(width).collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        rows[a]
            .iter()
            .zip(rows[b])
            .map(|(p, q)| p.to_f64_lossy().total_cmp(&q.to_f64_lossy()))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Collapses a `[T, D]` stream to `[D]` with the given strategy.
///
/// The mask-based strategies pool `x` against the sentence feature with the
/// visual question-pooling attention of `temporal` to generate their masks.
pub fn baseline_pool<T: Real>(
    ctx: &mut Ctx<'_, T>,
    strategy: PoolingStrategy,
    x: Var,
    sentence: Var,
    temporal: Option<&TemporalParams>,
) -> Result<Var> {
    let [t, d] = ctx.graph.dims(x)[..] else {
        return Err(Error::shape("baseline_pool", format!("{:?}", ctx.graph.dims(x))));
    };
    match strategy {
        PoolingStrategy::Uniform => {
            // averaging in a canonical row order makes the result exactly,
            // not just approximately, independent of frame order
            let order = canonical_row_order(ctx.value(x).data(), d);
            let rows = ctx.graph.gather_rows(x, &order)?;
            ctx.graph.mean_axis(rows)
        }
        PoolingStrategy::TopK(k) => {
            if k > t {
                return Err(Error::Config(format!("top_k K={k} exceeds {t} frames")));
            }
            if k == 0 {
                return Err(Error::Config("top_k needs K >= 1".into()));
            }
            let picked = top_k_indices(ctx.value(x).data(), d, ctx.value(sentence).data(), k);
            let rows = ctx.graph.gather_rows(x, &picked)?;
            ctx.graph.mean_axis(rows)
        }
        masked => {
            let params = temporal
                .ok_or_else(|| Error::Config(format!("{masked} needs temporal parameters")))?;
            let options = masked.temporal_options(false).expect("mask-based strategy");
            let pooled = pool_by_question(ctx, &params.pool_visual, sentence, x)?;
            let curves = generate_gaussians(ctx, pooled, &params.generator, t, options.centers)?;
            let routing = if options.routed {
                Some(route(ctx, pooled, params.router)?)
            } else {
                None
            };
            let bank = if options.experts {
                Some(params.bank_visual.as_ref().ok_or_else(|| {
                    Error::Config("expert banks were not initialized".into())
                })?)
            } else {
                None
            };
            integrate(ctx, x, curves.curves, routing, bank, false)
        }
    }
}
