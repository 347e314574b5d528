//! Named parameters and the small set of layers the networks are built from.
//!
//! A network is a plain struct of [`ParamId`]s plus a [`ParamStore`] that
//! owns the values. Each forward pass binds the store onto a fresh tape.

use std::ops::Index;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Register every parameter on `tape`. With `trainable = false` the
    /// parameters enter as constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect())
    }

    /// Gradients for each parameter after `tape.backward`, zero where the
    /// loss did not depend on a parameter.
    pub fn grads(&self, tape: &Tape, bound: &Bound) -> Vec<Tensor> {
        bound
            .0
            .iter()
            .zip(&self.values)
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint { records: self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect() }
    }

    /// Overwrite values from a checkpoint section; every parameter must be
    /// present with a matching shape.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = ck.require(name)?;
            if t.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                    value.shape(),
                    t.shape()
                )));
            }
            *value = t.clone();
        }
        Ok(())
    }
}

/// Tape handles for one binding of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wrap tape handles that were registered in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Scoped name builder used while constructing networks.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() { name.to_string() } else { format!("{saved}.{name}") };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        let n = self.full(name);
        self.store.add(n, t)
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n = self.full(name);
        self.store.add(n, Tensor::full(shape, value))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        b.scoped(name, |b| Linear {
            w: b.randn("w", &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt()),
            b: b.fill("b", &[fan_out], 0.0),
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = t.matmul(x, p[self.w])?;
        t.add_bias(y, p[self.b])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, width: usize) -> Self {
        b.scoped(name, |b| LayerNorm { gamma: b.fill("g", &[width], 1.0), beta: b.fill("b", &[width], 0.0) })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        t.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

/// Same-padded square convolution with bias on `B×H×W×C` inputs.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = kernel * kernel * cin;
        b.scoped(name, |b| Conv2d {
            w: b.randn("w", &[fan_in, cout], (1.0 / fan_in as f64).sqrt()),
            b: b.fill("b", &[cout], 0.0),
            kernel,
            stride,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = t.conv2d(x, p[self.w], self.kernel, self.stride)?;
        t.add_bias(y, p[self.b])
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, input: usize, hidden: usize, output: usize) -> Self {
        b.scoped(name, |b| Mlp { fc1: Linear::new(b, "fc1", input, hidden), fc2: Linear::new(b, "fc2", hidden, output) })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(t, p, x)?;
        let h = t.gelu(h)?;
        self.fc2.forward(t, p, h)
    }
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, name: &str, width: usize, kv_width: usize, heads: usize) -> Self {
        b.scoped(name, |b| MultiHeadAttention {
            q: Linear::new(b, "q", width, width),
            k: Linear::new(b, "k", kv_width, width),
            v: Linear::new(b, "v", kv_width, width),
            o: Linear::new(b, "o", width, width),
            heads,
        })
    }

    /// `queries` is `batch·Nq × width`, `context` is `batch·Nk × kv_width`.
    pub fn forward(&self, t: &mut Tape, p: &Bound, queries: Var, context: Var, batch: usize) -> Result<Var> {
        let q = self.q.forward(t, p, queries)?;
        let k = self.k.forward(t, p, context)?;
        let v = self.v.forward(t, p, context)?;
        let a = t.attention(q, k, v, batch, self.heads)?;
        self.o.forward(t, p, a)
    }
}

/// Sinusoidal embedding of integer timesteps: `[sin(t·f_i), cos(t·f_i)]`
/// with `f_i = 10000^(−i/half)`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize) -> Result<Tensor> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(dim_err!("timestep embedding width must be even, got {dim}"));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let row_start = data.len();
        data.resize(row_start + dim, 0.0);
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            data[row_start + i] = arg.sin();
            data[row_start + half + i] = arg.cos();
        }
    }
    Tensor::new(&[timesteps.len(), dim], data)
}

/// Rearrange `B×H×W×C` images into `B·(H/P)(W/P) × P·P·C` sub-patch rows,
/// row-major over the sub-patch grid, each row ordered `(py, px, c)`.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let &[b, h, w, c] = images.shape() else {
        return Err(dim_err!("patchify expects B×H×W×C, got {:?}", images.shape()));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(dim_err!("image {h}×{w} not divisible by sub-patch size {patch}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let start = ((bi * h + y) * w + gx * patch) * c;
                    out.extend_from_slice(&src[start..start + patch * c]);
                }
            }
        }
    }
    Tensor::new(&[b * gh * gw, patch * patch * c], out)
}

/// Stack equally shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| dim_err!("cannot stack zero tensors"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(dim_err!("stack shape mismatch {:?} vs {:?}", t.shape(), first.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}
