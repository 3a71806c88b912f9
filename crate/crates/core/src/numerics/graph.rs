//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly, stores its output and whatever it needs for the backward pass,
//! and returns a [`Var`] handle. Because nodes can only reference earlier
//! nodes, insertion order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use avqa::numerics::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let p = g.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.mul(p, p).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0]);
//! ```

use super::real::{lit, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    ClampMin(Var, T),
    Softmax(Var),
    MeanAxis(Var),
    SumAll(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    GatherRows(Var, Vec<usize>),
    Gaussian {
        mu: Var,
        sigma: Var,
        peak: Vec<usize>,
    },
    RowNormalize(Var),
    CrossEntropy { logits: Var, label: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` for nodes the loss does not
    /// depend on through differentiable paths.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul { a, b, .. }
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::Gaussian { mu, sigma, .. } => {
                self.nodes[mu.0].needs_grad || self.nodes[sigma.0].needs_grad
            }
            Op::Concat(parts) => parts.iter().any(|p| self.nodes[p.0].needs_grad),
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::ClampMin(a, _)
            | Op::Softmax(a)
            | Op::MeanAxis(a)
            | Op::SumAll(a)
            | Op::Reshape(a)
            | Op::SplitHeads(a, _)
            | Op::MergeHeads(a, _)
            | Op::GatherRows(a, _)
            | Op::RowNormalize(a)
            | Op::CrossEntropy { logits: a, .. } => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    // ----------------------------------------------------------------- linear

    /// Matrix product of rank-2 operands, or batched product of rank-3
    /// operands sharing the leading (batch) extent.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes the last two axes when the
    /// corresponding flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let shape = MatMulShape::infer(self.dims(a), ta, self.dims(b), tb)?;
        let mut out = vec![T::zero(); shape.batch * shape.m * shape.n];
        gemm_batched(
            shape.batch,
            shape.m,
            shape.k,
            shape.n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
        );
        let dims = shape.out_dims();
        self.push("matmul", Tensor::new(&dims, out)?, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b))
    }

    /// Adds a vector to every slice along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = *self.dims(a).last().expect("rank >= 1");
        if self.dims(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.dims(a), self.dims(bias)),
            ));
        }
        let mut v = self.value(a).clone();
        let b = self.value(bias).data();
        for row in v.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.push("add_bias", v, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c))
    }

    // ------------------------------------------------------------ pointwise

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::tanh);
        self.push("tanh", v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::exp);
        self.push("exp", v, Op::Exp(a))
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(floor));
        self.push("clamp_min", v, Op::ClampMin(a, floor))
    }

    /// Softmax over the last axis, computed after subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = *x.dims().last().expect("rank >= 1");
        let mut v = x.clone();
        for row in v.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push("softmax", v, Op::Softmax(a))
    }

    /// Divides every last-axis row by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = *x.dims().last().expect("rank >= 1");
        let mut v = x.clone();
        for row in v.data_mut().chunks_mut(n) {
            let s: T = row.iter().copied().sum();
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        self.push("row_normalize", v, Op::RowNormalize(a))
    }

    // ---------------------------------------------------------- reductions

    /// Mean over the second-to-last axis: `[B, M, N] -> [B, N]`,
    /// `[M, N] -> [N]`.
    pub fn mean_axis(&mut self, a: Var) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        let (batch, m, n) = match dims.as_slice() {
            [m, n] => (1, *m, *n),
            [b, m, n] => (*b, *m, *n),
            _ => return Err(Error::shape("mean_axis", format!("rank {}", dims.len()))),
        };
        let x = self.value(a).data();
        let inv = T::one() / lit::<T>(m as f64);
        let mut out = vec![T::zero(); batch * n];
        for b in 0..batch {
            let dst = &mut out[b * n..(b + 1) * n];
            for r in 0..m {
                let src = &x[(b * m + r) * n..(b * m + r + 1) * n];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let out_dims: Vec<usize> = if dims.len() == 2 {
            vec![n]
        } else {
            vec![batch, n]
        };
        self.push("mean_axis", Tensor::new(&out_dims, out)?, Op::MeanAxis(a))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::SumAll(a))
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / lit::<T>(n as f64))
    }

    // -------------------------------------------------------------- layout

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.dims(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let d = self.dims(p);
            if d[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs trailing {tail:?}", d),
                ));
            }
            lead += d[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut dims = vec![lead];
        dims.extend_from_slice(&tail);
        self.push("concat", Tensor::new(&dims, data)?, Op::Concat(parts.to_vec()))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let reshaped = rows
            .iter()
            .map(|&r| {
                let n = self.value(r).len();
                self.reshape(r, &[1, n])
            })
            .collect::<Result<Vec<_>>>()?;
        self.concat(&reshaped)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(dims)?;
        self.push("reshape", v, Op::Reshape(a))
    }

    /// `[B, S, H*dh] -> [B*H, S, dh]` (rank-2 input is treated as `B = 1`).
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let (b, s, d) = batch_dims(self.dims(a), "split_heads")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "split_heads",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for si in 0..s {
                for h in 0..heads {
                    let src = &x[(bi * s + si) * d + h * dh..][..dh];
                    let dst = ((bi * heads + h) * s + si) * dh;
                    out[dst..dst + dh].copy_from_slice(src);
                }
            }
        }
        let v = Tensor::new(&[b * heads, s, dh], out)?;
        self.push("split_heads", v, Op::SplitHeads(a, heads))
    }

    /// Inverse of [`Graph::split_heads`]: `[B*H, S, dh] -> [B, S, H*dh]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        let [bh, s, dh] = dims[..] else {
            return Err(Error::shape("merge_heads", format!("{dims:?}")));
        };
        if heads == 0 || bh % heads != 0 {
            return Err(Error::shape("merge_heads", format!("{bh} % {heads}")));
        }
        let b = bh / heads;
        let d = heads * dh;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for si in 0..s {
                for h in 0..heads {
                    let src = ((bi * heads + h) * s + si) * dh;
                    out[(bi * s + si) * d + h * dh..][..dh].copy_from_slice(&x[src..src + dh]);
                }
            }
        }
        let v = Tensor::new(&[b, s, d], out)?;
        self.push("merge_heads", v, Op::MergeHeads(a, heads))
    }

    /// Selects rows of a matrix (or entries of a vector).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let r = x.dims()[0];
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::shape(
                "gather_rows",
                format!("indices {rows:?} out of range for {r} rows"),
            ));
        }
        let w = x.len() / r;
        let mut data = Vec::with_capacity(rows.len() * w);
        for &i in rows {
            data.extend_from_slice(x.row(i));
        }
        let mut dims = x.dims().to_vec();
        dims[0] = rows.len();
        self.push(
            "gather_rows",
            Tensor::new(&dims, data)?,
            Op::GatherRows(a, rows.to_vec()),
        )
    }

    // ---------------------------------------------------------- composites

    /// Peak-normalized Gaussian curves sampled at segment midpoints.
    ///
    /// For centers `mu` and widths `sigma` (both length `E`), returns the
    /// `E x steps` matrix `exp(-(x_t - mu)^2 / (2 sigma^2)) / max_t(..)` with
    /// `x_t = (t + 0.5) / steps`. The maximum is taken in log space, so the
    /// peak of every row is exactly one and narrow curves cannot underflow
    /// into `0 / 0`.
    pub fn gaussian_curves(&mut self, mu: Var, sigma: Var, steps: usize) -> Result<Var> {
        let e = self.value(mu).len();
        if self.value(sigma).len() != e || steps == 0 {
            return Err(Error::shape(
                "gaussian_curves",
                format!("mu {e}, sigma {}, steps {steps}", self.value(sigma).len()),
            ));
        }
        let positions = midpoints::<T>(steps);
        let mut out = Vec::with_capacity(e * steps);
        let mut peak = Vec::with_capacity(e);
        for i in 0..e {
            let m = self.value(mu).data()[i];
            let s = self.value(sigma).data()[i];
            let p = nearest(&positions, m);
            let dp = positions[p] - m;
            let two_var = lit::<T>(2.0) * s * s;
            for &x in &positions {
                let d = x - m;
                out.push((-(d * d - dp * dp) / two_var).exp());
            }
            peak.push(p);
        }
        let v = Tensor::new(&[e, steps], out)?;
        self.push("gaussian_curves", v, Op::Gaussian { mu, sigma, peak })
    }

    /// Cross-entropy of a logit vector against a class index, in
    /// log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let loss = log_sum_exp(z) - z[label];
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, label },
        )
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::filled(self.dims(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let shape = MatMulShape::infer(self.dims(a), ta, self.dims(b), tb)
                    .expect("validated in forward");
                let (bt, m, k, n) = (shape.batch, shape.m, shape.k, shape.n);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let g = dy.data();
                if self.nodes[a.0].needs_grad {
                    let da = slot(grads, a, self.dims(a));
                    if ta {
                        gemm_batched(bt, k, n, m, bv, tb, g, true, da.data_mut());
                    } else {
                        gemm_batched(bt, m, n, k, g, false, bv, !tb, da.data_mut());
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let db = slot(grads, b, self.dims(b));
                    if tb {
                        gemm_batched(bt, n, m, k, g, true, av, ta, db.data_mut());
                    } else {
                        gemm_batched(bt, k, m, n, av, !ta, g, false, db.data_mut());
                    }
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, dy.data(), |g| g);
                self.accumulate(grads, b, dy.data(), |g| g);
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, dy.data(), |g| g);
                self.accumulate(grads, b, dy.data(), |g| -g);
            }
            &Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let bv = self.value(b).data();
                    let da = slot(grads, a, self.dims(a));
                    for ((d, &g), &x) in da.data_mut().iter_mut().zip(dy.data()).zip(bv) {
                        *d += g * x;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let av = self.value(a).data();
                    let db = slot(grads, b, self.dims(b));
                    for ((d, &g), &x) in db.data_mut().iter_mut().zip(dy.data()).zip(av) {
                        *d += g * x;
                    }
                }
            }
            &Op::AddBias(a, bias) => {
                self.accumulate(grads, a, dy.data(), |g| g);
                if self.nodes[bias.0].needs_grad {
                    let n = self.value(bias).len();
                    let db = slot(grads, bias, self.dims(bias));
                    for row in dy.data().chunks(n) {
                        for (d, &g) in db.data_mut().iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, dy.data(), |g| g * c),
            &Op::Tanh(a) => {
                self.accumulate_with(grads, a, dy, y, |g, t| g * (T::one() - t * t));
            }
            &Op::Sigmoid(a) => {
                self.accumulate_with(grads, a, dy, y, |g, s| g * s * (T::one() - s));
            }
            &Op::Exp(a) => self.accumulate_with(grads, a, dy, y, |g, e| g * e),
            &Op::ClampMin(a, floor) => {
                let x = self.value(a);
                self.accumulate_with(grads, a, dy, x, |g, v| if v > floor { g } else { T::zero() });
            }
            &Op::Softmax(a) => {
                if !self.nodes[a.0].needs_grad {
                    return;
                }
                let n = *y.dims().last().expect("rank >= 1");
                let da = slot(grads, a, self.dims(a));
                for ((d, g), p) in da
                    .data_mut()
                    .chunks_mut(n)
                    .zip(dy.data().chunks(n))
                    .zip(y.data().chunks(n))
                {
                    let dot: T = g.iter().zip(p).map(|(&g, &p)| g * p).sum();
                    for ((d, &g), &p) in d.iter_mut().zip(g).zip(p) {
                        *d += p * (g - dot);
                    }
                }
            }
            &Op::RowNormalize(a) => {
                if !self.nodes[a.0].needs_grad {
                    return;
                }
                let x = self.value(a);
                let n = *y.dims().last().expect("rank >= 1");
                let da = slot(grads, a, self.dims(a));
                for (((d, g), p), xr) in da
                    .data_mut()
                    .chunks_mut(n)
                    .zip(dy.data().chunks(n))
                    .zip(y.data().chunks(n))
                    .zip(x.data().chunks(n))
                {
                    let s: T = xr.iter().copied().sum();
                    let dot: T = g.iter().zip(p).map(|(&g, &p)| g * p).sum();
                    for (d, &g) in d.iter_mut().zip(g) {
                        *d += (g - dot) / s;
                    }
                }
            }
            &Op::MeanAxis(a) => {
                if !self.nodes[a.0].needs_grad {
                    return;
                }
                let dims = self.dims(a).to_vec();
                let (m, n) = (dims[dims.len() - 2], dims[dims.len() - 1]);
                let inv = T::one() / lit::<T>(m as f64);
                let da = slot(grads, a, &dims);
                for (b, grow) in dy.data().chunks(n).enumerate() {
                    for r in 0..m {
                        let dst = &mut da.data_mut()[(b * m + r) * n..][..n];
                        for (d, &g) in dst.iter_mut().zip(grow) {
                            *d += g * inv;
                        }
                    }
                }
            }
            &Op::SumAll(a) => {
                let g = dy.data()[0];
                if self.nodes[a.0].needs_grad {
                    let da = slot(grads, a, self.dims(a));
                    for d in da.data_mut() {
                        *d += g;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, &dy.data()[offset..offset + len], |g| g);
                    offset += len;
                }
            }
            &Op::Reshape(a) => self.accumulate(grads, a, dy.data(), |g| g),
            &Op::SplitHeads(a, heads) => {
                if !self.nodes[a.0].needs_grad {
                    return;
                }
                let (b, s, d) = batch_dims(self.dims(a), "split_heads").expect("validated");
                let dh = d / heads;
                let da = slot(grads, a, self.dims(a));
                let g = dy.data();
                for bi in 0..b {
                    for si in 0..s {
                        for h in 0..heads {
                            let src = ((bi * heads + h) * s + si) * dh;
                            let dst = &mut da.data_mut()[(bi * s + si) * d + h * dh..][..dh];
                            for (x, &v) in dst.iter_mut().zip(&g[src..src + dh]) {
                                *x += v;
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads(a, heads) => {
                if !self.nodes[a.0].needs_grad {
                    return;
                }
                let dims = self.dims(a).to_vec();
                let (bh, s, dh) = (dims[0], dims[1], dims[2]);
                let b = bh / heads;
                let d = heads * dh;
                let da = slot(grads, a, &dims);
                let g = dy.data();
                for bi in 0..b {
                    for si in 0..s {
                        for h in 0..heads {
                            let dst = ((bi * heads + h) * s + si) * dh;
                            let src = &g[(bi * s + si) * d + h * dh..][..dh];
                            for (x, &v) in da.data_mut()[dst..dst + dh].iter_mut().zip(src) {
                                *x += v;
                            }
                        }
                    }
                }
            }
            Op::GatherRows(a, rows) => {
                let a = *a;
                if !self.nodes[a.0].needs_grad {
                    return;
                }
                let w = dy.len() / rows.len();
                let da = slot(grads, a, self.dims(a));
                for (k, &i) in rows.iter().enumerate() {
                    let dst = &mut da.data_mut()[i * w..(i + 1) * w];
                    for (x, &g) in dst.iter_mut().zip(&dy.data()[k * w..(k + 1) * w]) {
                        *x += g;
                    }
                }
            }
            Op::Gaussian { mu, sigma, peak } => {
                let (mu, sigma) = (*mu, *sigma);
                let steps = y.dims()[1];
                let positions = midpoints::<T>(steps);
                let mut dmu = vec![T::zero(); peak.len()];
                let mut dsigma = vec![T::zero(); peak.len()];
                for (i, &p) in peak.iter().enumerate() {
                    let m = self.value(mu).data()[i];
                    let s = self.value(sigma).data()[i];
                    let dp = positions[p] - m;
                    for (t, &x) in positions.iter().enumerate() {
                        let d = x - m;
                        let gy = dy.data()[i * steps + t] * y.data()[i * steps + t];
                        dmu[i] += gy * (d - dp) / (s * s);
                        dsigma[i] += gy * (d * d - dp * dp) / (s * s * s);
                    }
                }
                self.accumulate(grads, mu, &dmu, |g| g);
                self.accumulate(grads, sigma, &dsigma, |g| g);
            }
            &Op::CrossEntropy { logits, label } => {
                if !self.nodes[logits.0].needs_grad {
                    return;
                }
                let g = dy.data()[0];
                let mut p = self.value(logits).data().to_vec();
                softmax_in_place(&mut p);
                p[label] -= T::one();
                self.accumulate(grads, logits, &p, |x| x * g);
            }
        }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        target: Var,
        src: &[T],
        f: impl Fn(T) -> T,
    ) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(d) => {
                for (x, &g) in d.data_mut().iter_mut().zip(src) {
                    *x += f(g);
                }
            }
            empty => {
                let data = src.iter().map(|&g| f(g)).collect();
                *empty = Some(Tensor::new(self.dims(target), data).expect("gradient matches value"));
            }
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<T>>],
        target: Var,
        dy: &Tensor<T>,
        saved: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(d) => {
                for ((x, &g), &s) in d.data_mut().iter_mut().zip(dy.data()).zip(saved.data()) {
                    *x += f(g, s);
                }
            }
            empty => {
                let data = dy.data().iter().zip(saved.data()).map(|(&g, &s)| f(g, s)).collect();
                *empty = Some(Tensor::new(self.dims(target), data).expect("gradient matches value"));
            }
        }
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], v: Var, dims: &[usize]) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(dims))
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.dims(), data).expect("same shape")
}

fn batch_dims(dims: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *dims {
        [s, d] => Ok((1, s, d)),
        [b, s, d] => Ok((b, s, d)),
        _ => Err(Error::shape(op, format!("{dims:?}"))),
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn log_sum_exp<T: Real>(z: &[T]) -> T {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    max + z.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// Normalized segment midpoints `(t + 0.5) / steps`.
pub(crate) fn midpoints<T: Real>(steps: usize) -> Vec<T> {
    (0..steps)
        .map(|t| lit::<T>((t as f64 + 0.5) / steps as f64))
        .collect()
}

fn nearest<T: Real>(positions: &[T], m: T) -> usize {
    let mut best = 0;
    for (i, &x) in positions.iter().enumerate() {
        if (x - m).abs() < (positions[best] - m).abs() {
            best = i;
        }
    }
    best
}

struct MatMulShape {
    batched: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl MatMulShape {
    fn infer(a: &[usize], ta: bool, b: &[usize], tb: bool) -> Result<Self> {
        let (batched, batch, ar, ac, br, bc) = match (a, b) {
            ([ar, ac], [br, bc]) => (false, 1, *ar, *ac, *br, *bc),
            ([ba, ar, ac], [bb, br, bc]) if ba == bb => (true, *ba, *ar, *ac, *br, *bc),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("unsupported operand ranks {a:?} x {b:?}"),
                ))
            }
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {a:?}{} x {b:?}{}", t(ta), t(tb)),
            ));
        }
        Ok(Self {
            batched,
            batch,
            m,
            k,
            n,
        })
    }

    fn out_dims(&self) -> Vec<usize> {
        if self.batched {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}

fn t(flag: bool) -> &'static str {
    if flag {
        "ᵀ"
    } else {
        ""
    }
}

/// `c += op(x) · op(y)` for `batch` independent products of shape
/// `(m x inner) · (inner x n)`. When `tx` is set `x` is stored `inner x m`;
/// when `ty` is set `y` is stored `n x inner`.
#[allow(clippy::too_many_arguments)]
fn gemm_batched<T: Real>(
    batch: usize,
    m: usize,
    inner: usize,
    n: usize,
    x: &[T],
    tx: bool,
    y: &[T],
    ty: bool,
    c: &mut [T],
) {
    let (rsx, csx) = if tx { (1, m as isize) } else { (inner as isize, 1) };
    let (rsy, csy) = if ty { (1, inner as isize) } else { (n as isize, 1) };
    assert!(x.len() >= batch * m * inner && y.len() >= batch * inner * n && c.len() >= batch * m * n);
    // packing overhead dominates tiny products (per-frame patch attention)
    let small = m * inner * n <= 1024;
    for bi in 0..batch {
        let xs = &x[bi * m * inner..(bi + 1) * m * inner];
        let ys = &y[bi * inner * n..(bi + 1) * inner * n];
        let cs = &mut c[bi * m * n..(bi + 1) * m * n];
        if small {
            small_gemm(m, inner, n, xs, (rsx as usize, csx as usize), ys, ty, cs);
            continue;
        }
        // SAFETY: the slices above hold exactly the extents described by the
        // (m, inner, n) dimensions and the strides computed from them.
        unsafe {
            T::gemm(
                m,
                inner,
                n,
                T::one(),
                xs.as_ptr(),
                rsx,
                csx,
                ys.as_ptr(),
                rsy,
                csy,
                T::one(),
                cs.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Plain loops for one small product, arranged so the innermost loop walks
/// contiguous memory of `y`.
#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Real>(m: usize, inner: usize, n: usize, x: &[T], (rsx, csx): (usize, usize), y: &[T], ty: bool, c: &mut [T]) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if ty {
            // y is n x inner: one dot product per output
            for (j, out) in row.iter_mut().enumerate() {
                let yr = &y[j * inner..(j + 1) * inner];
                let mut s = T::zero();
                for (l, &b) in yr.iter().enumerate() {
                    s += x[i * rsx + l * csx] * b;
                }
                *out += s;
            }
        } else {
            for l in 0..inner {
                let a = x[i * rsx + l * csx];
                for (out, &b) in row.iter_mut().zip(&y[l * n..(l + 1) * n]) {
                    *out += a * b;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = g.matmul(i, a).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0]]));
        let b = g.constant(m(&[&[3.0], &[4.0]]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn zero_annihilates() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 2]));
        let a = g.constant(m(&[&[1.5, -2.0, 7.0], &[3.0, 4.0, 0.25]]));
        let p = g.matmul(z, a).unwrap();
        assert!(g.value(p).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn inner_dimension_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
        assert!(g.matmul_t(a, b, false, true).is_ok());
    }

    #[test]
    fn transposed_products_agree_with_explicit_layout() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let b = g.constant(m(&[&[1.0, 0.0, -1.0], &[2.0, 1.0, 0.0]]));
        let abt = g.matmul_t(a, b, false, true).unwrap();
        assert_eq!(g.value(abt).data(), &[-2.0, 4.0, -2.0, 13.0]);
        let atb = g.matmul_t(a, b, true, false).unwrap();
        assert_eq!(
            g.value(atb).data(),
            &[9.0, 4.0, -1.0, 12.0, 5.0, -2.0, 15.0, 6.0, -3.0]
        );
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.softmax(b).unwrap();
        // e^k / (e + e^2 + e^3)
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        let want = [1.0f64.exp() / z, 2.0f64.exp() / z, 3.0f64.exp() / z];
        for (got, w) in g.value(s).data().iter().zip(want) {
            assert!((got - w).abs() < 1e-15);
        }
        for (got, w) in g.value(s).data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - w).abs() < 5e-6);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.3, -1.2, 2.5]));
        let b = g.constant(Tensor::vector(vec![100.3, 98.8, 102.5]));
        let sa = g.softmax(a).unwrap();
        let sb = g.softmax(b).unwrap();
        assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
    }

    #[test]
    fn pointwise_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let t = g.tanh(z).unwrap();
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(t).data(), &[0.0]);
        assert_eq!(g.value(s).data(), &[0.5]);
        let v = g.constant(Tensor::vector(vec![2.0, 4.0]));
        let mu = g.mean(v).unwrap();
        assert_eq!(g.value(mu).data(), &[3.0]);
    }

    #[test]
    fn sum_gives_unit_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::filled(&[2, 3, 2], 0.7));
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(p).unwrap().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn detached_tensor_gets_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        let d = g.detach(p);
        let y = g.mul(p, d).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(d).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![1000.0]));
        assert!(matches!(g.exp(p), Err(Error::NonFinite("exp"))));
    }

    #[test]
    fn split_and_merge_heads_are_inverse() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(Tensor::new(&[2, 3, 4], data.clone()).unwrap());
        let s = g.split_heads(x, 2).unwrap();
        assert_eq!(g.dims(s), &[4, 3, 2]);
        // head 1 of batch 0, row 0 holds columns 2..4 of x[0, 0]
        assert_eq!(g.value(s).row(1)[..2], [2.0, 3.0]);
        let m = g.merge_heads(s, 2).unwrap();
        assert_eq!(g.value(m).data(), &data[..]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0; 4]));
        let l = g.cross_entropy(z, 2).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
        assert!(g.cross_entropy(z, 4).is_err());
    }

    #[test]
    fn gaussian_peak_is_exactly_one() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::vector(vec![0.1, 0.5, 0.93]));
        let sigma = g.constant(Tensor::vector(vec![1e-4, 0.3, 0.05]));
        let c = g.gaussian_curves(mu, sigma, 7).unwrap();
        for i in 0..3 {
            let row = g.value(c).row(i);
            assert_eq!(row.iter().copied().fold(f64::MIN, f64::max), 1.0);
        }
    }
}
