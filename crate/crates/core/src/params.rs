//! Named parameter storage and the per-forward binding of parameters to
//! graph leaves.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{lit, Graph, Real, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("parameter init"));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor with the same-named tensor from `named`,
    /// checking that names and shapes line up exactly.
    pub fn load(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors, model expects {}",
                named.len(),
                self.tensors.len()
            )));
        }
        for (name, tensor) in named {
            let i = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Contract(format!("unexpected tensor {name:?}")))?;
            if tensor.dims() != self.tensors[i].dims() {
                return Err(Error::shape(
                    "load",
                    format!("{name}: {:?} vs {:?}", tensor.dims(), self.tensors[i].dims()),
                ));
            }
            self.tensors[i] = tensor;
        }
        Ok(())
    }

    /// Overwrites a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.dims() != self.tensors[id.0].dims() {
            return Err(Error::shape(
                "set",
                format!("{:?} vs {:?}", value.dims(), self.tensors[id.0].dims()),
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform entries in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform<T: Real>(&mut self, dims: &[usize], fan_in: usize) -> Tensor<T> {
        Tensor::uniform(dims, 1.0 / (fan_in as f64).sqrt(), &mut self.rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Attention-probability dropout driven by a seeded generator.
#[derive(Debug)]
pub struct Dropout {
    pub rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn mask<T: Real>(&mut self, dims: &[usize]) -> Tensor<T> {
        let keep = 1.0 - self.rate;
        let scale = lit::<T>(1.0 / keep);
        let threshold = (keep * u32::MAX as f64) as u32;
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                if self.rng.gen::<u32>() < threshold {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        Tensor::new(dims, data).expect("valid dims")
    }
}

/// A forward pass in progress: the graph plus the leaf bound to every
/// parameter of a store.
pub struct Ctx<'g, T> {
    pub graph: &'g mut Graph<T>,
    vars: Vec<Var>,
    dropout: Option<Dropout>,
}

impl<'g, T: Real> Ctx<'g, T> {
    /// Binds parameters as gradient-receiving leaves when `trainable`,
    /// constants otherwise.
    pub fn new(graph: &'g mut Graph<T>, store: &ParamStore<T>, trainable: bool) -> Self {
        let vars = store
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Self {
            graph,
            vars,
            dropout: None,
        }
    }

    /// Binds parameters to existing graph leaves (used by gradient checks).
    pub fn with_vars(graph: &'g mut Graph<T>, vars: Vec<Var>) -> Self {
        Self {
            graph,
            vars,
            dropout: None,
        }
    }

    pub fn with_dropout(mut self, dropout: Option<Dropout>) -> Self {
        self.dropout = dropout.filter(|d| d.rate > 0.0);
        self
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Applies dropout to `x` when a dropout source is attached.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.dropout.as_mut() {
            None => Ok(x),
            Some(d) => {
                let mask = d.mask(self.graph.dims(x));
                let m = self.graph.constant(mask);
                self.graph.mul(x, m)
            }
        }
    }
}

/// Affine map `x W + b` applied along the last axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.uniform(&[input, output], input))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]))?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let dims = ctx.graph.dims(x).to_vec();
        let last = *dims.last().expect("rank >= 1");
        if last != self.input {
            return Err(Error::shape(
                "linear",
                format!("input {dims:?}, expected last dim {}", self.input),
            ));
        }
        let rows = dims.iter().product::<usize>() / last;
        let flat = ctx.graph.reshape(x, &[rows, last])?;
        let y = ctx.graph.matmul(flat, ctx.p(self.weight))?;
        let y = ctx.graph.add_bias(y, ctx.p(self.bias))?;
        let mut out = dims;
        *out.last_mut().expect("rank >= 1") = self.output;
        ctx.graph.reshape(y, &out)
    }
}
