//! Plain-loop reference implementation of the whole model, written from
//! the definitions rather than from the library code. Only parameter
//! names are shared with the library.

#![allow(dead_code)]

use avqa::experts::PatchResidual;
use avqa::fusion::RawInputs;
use avqa::harness::baseline::PoolingStrategy;
use avqa::Model;

pub type Mat = Vec<Vec<f64>>;

pub struct Params<'a>(pub &'a Model<f64>);

impl Params<'_> {
    fn get(&self, name: &str) -> (&[usize], &[f64]) {
        let t = self
            .0
            .store
            .by_name(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        (t.dims(), t.data())
    }

    pub fn mat(&self, name: &str) -> Mat {
        let (dims, data) = self.get(name);
        assert_eq!(dims.len(), 2, "{name}");
        data.chunks(dims[1]).map(<[f64]>::to_vec).collect()
    }

    pub fn vec(&self, name: &str) -> Vec<f64> {
        self.get(name).1.to_vec()
    }

    /// Slice `i` of a rank-3 parameter.
    pub fn slab(&self, name: &str, i: usize) -> Mat {
        let (dims, data) = self.get(name);
        let (r, c) = (dims[1], dims[2]);
        data[i * r * c..(i + 1) * r * c].chunks(c).map(<[f64]>::to_vec).collect()
    }
}

pub fn rows(dims: &[usize], data: &[f64]) -> Mat {
    data.chunks(*dims.last().unwrap()).map(<[f64]>::to_vec).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut y = matmul(x, w);
    for row in &mut y {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

fn linear(p: &Params, name: &str, x: &Mat) -> Mat {
    affine(x, &p.mat(&format!("{name}.weight")), &p.vec(&format!("{name}.bias")))
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn mean_rows(x: &Mat) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x[0].len()).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Multi-head attention of each query row over the key/value rows.
pub fn attention(p: &Params, name: &str, heads: usize, q: &Mat, kv: &Mat) -> Mat {
    let qp = matmul(q, &p.mat(&format!("{name}.wq")));
    let kp = matmul(kv, &p.mat(&format!("{name}.wk")));
    let vp = matmul(kv, &p.mat(&format!("{name}.wv")));
    let d = qp[0].len();
    let dh = d / heads;
    let mut concat = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in qp.iter().enumerate() {
            let scores: Vec<f64> = kp
                .iter()
                .map(|kj| {
                    cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let w = softmax(&scores);
            for c in cols.clone() {
                concat[i][c] = w.iter().zip(&vp).map(|(wj, vj)| wj * vj[c]).sum();
            }
        }
    }
    matmul(&concat, &p.mat(&format!("{name}.wo")))
}

fn attend_one(p: &Params, name: &str, heads: usize, q: &[f64], kv: &Mat) -> Vec<f64> {
    attention(p, name, heads, &vec![q.to_vec()], kv).remove(0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Centers, widths, curves and routing of one modality.
pub struct Mixture {
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
    pub curves: Mat,
    pub routing: Vec<f64>,
}

fn mixture(p: &Params, strategy: PoolingStrategy, pooled: &[f64], steps: usize) -> Mixture {
    let e = strategy.experts().unwrap();
    let raw = linear(p, "temporal.generator", &vec![pooled.to_vec()]).remove(0);
    let margin = 1.0 / (2.0 * e as f64);
    let fixed: Vec<f64> = (0..e)
        .map(|i| if e == 1 { 0.5 } else { margin + i as f64 * (1.0 - 2.0 * margin) / (e as f64 - 1.0) })
        .collect();
    let disjoint = matches!(
        strategy,
        PoolingStrategy::WeightedGaussianDisjoint(_) | PoolingStrategy::GaussianExperts(_)
    );
    let centers: Vec<f64> = (0..e)
        .map(|i| {
            if disjoint {
                fixed[i] + margin * raw[i].tanh()
            } else {
                sigmoid((fixed[i] / (1.0 - fixed[i])).ln() + raw[i])
            }
        })
        .collect();
    let widths: Vec<f64> = (0..e).map(|i| sigmoid(raw[e + i]).max(1e-4)).collect();
    let curves = (0..e)
        .map(|i| {
            let g: Vec<f64> = (0..steps)
                .map(|t| {
                    let x = (t as f64 + 0.5) / steps as f64;
                    (-(x - centers[i]).powi(2) / (2.0 * widths[i] * widths[i])).exp()
                })
                .collect();
            let peak = g.iter().cloned().fold(0.0, f64::max);
            g.iter().map(|v| v / peak).collect()
        })
        .collect();
    let routed = !matches!(strategy, PoolingStrategy::Gaussian(_));
    let routing = if routed {
        softmax(&matmul(&vec![pooled.to_vec()], &p.mat("temporal.router"))[0])
    } else {
        vec![1.0; e]
    };
    Mixture {
        centers,
        widths,
        curves,
        routing,
    }
}

/// `sum_i r_i sum_t g[i,t] E_i(x[t])`, with identity experts when `bank`
/// is `None`.
fn integrate(p: &Params, m: &Mixture, x: &Mat, bank: Option<&str>) -> Vec<f64> {
    let d = x[0].len();
    let mut out = vec![0.0; d];
    for (i, (r, g)) in m.routing.iter().zip(&m.curves).enumerate() {
        for (t, xt) in x.iter().enumerate() {
            let mapped = match bank {
                Some(b) => {
                    let w = p.slab(&format!("{b}.weight"), i);
                    let bias = p.mat(&format!("{b}.bias"))[i].clone();
                    affine(&vec![xt.clone()], &w, &bias).remove(0)
                }
                None => xt.clone(),
            };
            for j in 0..d {
                out[j] += r * g[t] * mapped[j];
            }
        }
    }
    out
}

/// Reference logits plus the visual and audio mixtures.
pub fn forward(model: &Model<f64>, raw: &RawInputs<f64>) -> (Vec<f64>, Option<(Mixture, Mixture)>) {
    let p = Params(model);
    let c = &model.config;
    let h = c.heads;
    assert_eq!(c.patch_residual, PatchResidual::ModalityMatched);
    assert!(!c.normalize_time);
    let t = raw.visual.dims()[0];
    let m = raw.patches.dims()[1];

    let v = linear(&p, "input.visual", &rows(raw.visual.dims(), raw.visual.data()));
    let a = linear(&p, "input.audio", &rows(raw.audio.dims(), raw.audio.data()));
    let patches = linear(&p, "input.patch", &rows(raw.patches.dims(), raw.patches.data()));
    let frame = |f: usize| -> Mat { patches[f * m..(f + 1) * m].to_vec() };
    let qs = linear(&p, "input.question", &vec![raw.sentence.data().to_vec()]).remove(0);
    let words = linear(&p, "input.question", &rows(raw.words.dims(), raw.words.data()));

    let (vq, aq, pv, pa) = if c.fusion {
        let fuse = |x: &Mat, other: &Mat, sa: &str, ca_o: &str, ca_w: &str| -> Mat {
            let s = attention(&p, sa, h, x, x);
            let c1 = attention(&p, ca_o, h, x, other);
            let c2 = attention(&p, ca_w, h, x, &words);
            (0..x.len())
                .map(|i| add(&add(&add(&x[i], &s[i]), &c1[i]), &c2[i]))
                .collect()
        };
        let vq = fuse(&v, &a, "fusion.sa_v", "fusion.ca_va", "fusion.ca_vq");
        let aq = fuse(&a, &v, "fusion.sa_a", "fusion.ca_av", "fusion.ca_aq");
        let mut pv = Vec::new();
        let mut pa = Vec::new();
        for f in 0..t {
            let pf = frame(f);
            let base = add(&mean_rows(&pf), &mean_rows(&attention(&p, "fusion.sa_p", h, &pf, &pf)));
            pv.push(add(&base, &attend_one(&p, "fusion.ca_pv", h, &vq[f], &pf)));
            pa.push(add(&base, &attend_one(&p, "fusion.ca_pa", h, &aq[f], &pf)));
        }
        (vq, aq, pv, pa)
    } else {
        let means: Mat = (0..t).map(|f| mean_rows(&frame(f))).collect();
        (v, a, means.clone(), means)
    };
    let pv: Mat = (0..t).map(|f| add(&vq[f], &pv[f])).collect();
    let pa: Mat = (0..t).map(|f| add(&aq[f], &pa[f])).collect();

    let (pool_pv, pool_pa, pool_a, mixtures) = match c.strategy {
        PoolingStrategy::Uniform => (mean_rows(&pv), mean_rows(&pa), mean_rows(&aq), None),
        PoolingStrategy::TopK(_) => panic!("the oracle does not cover top-k"),
        s => {
            let bank = |name: &'static str| matches!(s, PoolingStrategy::GaussianExperts(_)).then_some(name);
            let mv = mixture(&p, s, &attend_one(&p, "temporal.pool_v", h, &qs, &vq), t);
            let ma = mixture(&p, s, &attend_one(&p, "temporal.pool_a", h, &qs, &aq), t);
            (
                integrate(&p, &mv, &pv, bank("temporal.experts_v")),
                integrate(&p, &mv, &pa, bank("temporal.experts_v")),
                integrate(&p, &ma, &aq, bank("temporal.experts_a")),
                Some((mv, ma)),
            )
        }
    };

    let pair = |name: &str, x: &[f64], y: &[f64]| -> Vec<f64> {
        let avg: Vec<f64> = x.iter().zip(y).map(|(a, b)| 0.5 * (a + b)).collect();
        add(&avg, &attend_one(&p, name, h, &qs, &vec![x.to_vec(), y.to_vec()]))
    };
    let fv = pair("reasoning.ca_v", &pool_pa, &pool_pv);
    let mut fva = pair("reasoning.ca_va", &pool_a, &fv);
    if !c.fusion {
        fva = fva.iter().zip(&qs).map(|(x, q)| x * q).collect();
    }
    let logits = linear(&p, "reasoning.classifier", &vec![fva]).remove(0);
    (logits, mixtures)
}
