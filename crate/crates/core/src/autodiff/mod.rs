//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value. Nodes can only
//! reference earlier nodes, so the tape is topologically ordered by
//! construction and [`Tape::backward`] is a single reverse sweep.

pub mod attention;
pub mod conv;

use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::{as_matrix, gemm, Layout, Tensor};

pub use attention::AttnGeom;
pub use conv::ConvGeom;

/// Lower bound applied to probabilities before taking a logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Reshape(Var),
    Exp(Var),
    Sigmoid(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var, tau: f64 },
    LogSoftmax { x: Var, tau: f64 },
    CrossEntropy { target: Tensor, pred: Var },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<f64> },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    Upsample2x(Var),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    RepeatRows { x: Var, times: usize },
    TileRows { x: Var, times: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Exp(..) => "exp",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax_temperature",
            Op::LogSoftmax { .. } => "log_softmax_temperature",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Attention { .. } => "attention",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::TileRows { .. } => "tile_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. Confined to one thread; build a fresh tape per step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of operations processed by the last backward sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad matches value shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b))
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// `x + b` where `b` has the length of `x`'s trailing axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(b).len() != c {
            return Err(dim_err!("bias of {} for trailing axis {c}", self.value(b).len()));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu(v).0);
        self.push(out, Op::Gelu(x), &[x])
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), &[x])
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a))?;
        let (k2, n) = as_matrix(self.value(b))?;
        if k != k2 {
            return Err(dim_err!("matmul inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::N, self.value(b).data(), Layout::N, &mut out, 0.0);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Normalize each trailing-axis slice, then apply gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(dim_err!("layer_norm affine params must have length {c}"));
        }
        let rows = self.value(x).rows();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = self.value(x).clone();
        {
            let src = self.value(x).data();
            let (g, b) = (self.value(gamma).data(), self.value(beta).data());
            for r in 0..rows {
                let row = &src[r * c..(r + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd[r] = rs;
                for j in 0..c {
                    let xh = (row[j] - mu) * rs;
                    xhat[r * c + j] = xh;
                    out.data_mut()[r * c + j] = xh * g[j] + b[j];
                }
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Softmax of `logits / tau` along the trailing axis, max-subtracted.
    pub fn softmax_temperature(&mut self, x: Var, tau: f64) -> Result<Var> {
        let out = softmax_temperature(self.value(x), tau)?;
        self.push(out, Op::Softmax { x, tau }, &[x])
    }

    pub fn log_softmax_temperature(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let c = self.value(x).last_dim();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| ((v - max) / tau).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v = (*v - max) / tau - lse;
            }
        }
        self.push(out, Op::LogSoftmax { x, tau }, &[x])
    }

    /// `−Σ target · log(max(pred, PROB_CLAMP))` summed over every row.
    ///
    /// Both arguments must hold probability vectors along the trailing axis
    /// (each slice sums to 1 within 1e-6). The target is treated as a
    /// constant.
    pub fn cross_entropy(&mut self, target: &Tensor, pred: Var) -> Result<Var> {
        target.expect_same_shape(self.value(pred))?;
        check_probabilities(target, "target")?;
        check_probabilities(self.value(pred), "prediction")?;
        let loss = -target
            .data()
            .iter()
            .zip(self.value(pred).data())
            .map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * b.max(PROB_CLAMP).ln() })
            .sum::<f64>();
        self.push(Tensor::scalar(loss), Op::CrossEntropy { target: target.clone(), pred }, &[pred])
    }

    /// Multi-head scaled dot-product attention for `batch` independent
    /// sequences. `q` is `batch·Nq × D`; `k` and `v` are `batch·Nk × D`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (rq, d) = as_matrix(self.value(q))?;
        let (rk, dk) = as_matrix(self.value(k))?;
        let (rv, dv) = as_matrix(self.value(v))?;
        if dk != d || dv != d || rk != rv {
            return Err(dim_err!("attention widths q={d} k={dk} v={dv}, kv rows {rk} vs {rv}"));
        }
        if batch == 0 || rq % batch != 0 || rk % batch != 0 {
            return Err(dim_err!("attention rows {rq}/{rk} not divisible by batch {batch}"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(dim_err!("width {d} not divisible into {heads} heads"));
        }
        let geom = AttnGeom { batch, heads, q_len: rq / batch, kv_len: rk / batch, width: d };
        let (out, probs) =
            attention::forward(&geom, self.value(q).data(), self.value(k).data(), self.value(v).data());
        self.push(Tensor::new(&[rq, d], out)?, Op::Attention { q, k, v, geom, probs }, &[q, k, v])
    }

    /// Same-padded convolution. `x` is `B×H×W×Cin`, `w` is `K·K·Cin × Cout`
    /// with rows ordered `(ky, kx, cin)`.
    pub fn conv2d(&mut self, x: Var, w: Var, kernel: usize, stride: usize) -> Result<Var> {
        let &[batch, height, width, in_ch] = self.shape(x) else {
            return Err(dim_err!("conv2d input must be B×H×W×C, got {:?}", self.shape(x)));
        };
        let (rows, out_ch) = as_matrix(self.value(w))?;
        if kernel.is_multiple_of(2) || rows != kernel * kernel * in_ch {
            return Err(dim_err!("conv2d weight {rows}×{out_ch} for kernel {kernel}, cin {in_ch}"));
        }
        if stride == 0 || height % stride != 0 || width % stride != 0 {
            return Err(dim_err!("conv2d stride {stride} does not divide {height}×{width}"));
        }
        let geom = ConvGeom { batch, height, width, in_ch, out_ch, kernel, stride };
        let cols = conv::im2col(&geom, self.value(x).data());
        let mut out = vec![0.0; geom.out_pixels() * out_ch];
        gemm(geom.out_pixels(), rows, out_ch, &cols, Layout::N, self.value(w).data(), Layout::N, &mut out, 0.0);
        let shape = [batch, geom.out_height(), geom.out_width(), out_ch];
        self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, w, geom, cols }, &[x, w])
    }

    /// Nearest-neighbour ×2 upsampling of a `B×H×W×C` tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let &[b, h, w, c] = self.shape(x) else {
            return Err(dim_err!("upsample2x input must be B×H×W×C"));
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; b * 4 * h * w * c];
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let s = ((bi * h + y / 2) * w + xx / 2) * c;
                    let d = ((bi * 2 * h + y) * 2 * w + xx) * c;
                    out[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        self.push(Tensor::new(&[b, 2 * h, 2 * w, c], out)?, Op::Upsample2x(x), &[x])
    }

    // ---- structural -------------------------------------------------------

    /// Stack `a` on top of `b` (both viewed as rows of their trailing axis).
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.value(a).last_dim();
        if self.value(b).last_dim() != c {
            return Err(dim_err!("concat_rows widths {c} vs {}", self.value(b).last_dim()));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rows = data.len() / c;
        self.push(Tensor::new(&[rows, c], data)?, Op::ConcatRows(a, b), &[a, b])
    }

    /// Concatenate along the trailing axis; leading dims must agree.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err!("concat_cols leading dims {sa:?} vs {sb:?}"));
        }
        let (ca, cb) = (self.value(a).last_dim(), self.value(b).last_dim());
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("rank ≥ 1") = ca + cb;
        let mut data = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        for (ra, rb) in self.value(a).data().chunks(ca).zip(self.value(b).data().chunks(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        self.push(Tensor::new(&shape, data)?, Op::ConcatCols(a, b), &[a, b])
    }

    /// Columns `start..start+len` of the trailing axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.value(x).last_dim();
        if len == 0 || start + len > c {
            return Err(dim_err!("slice {start}..{} of width {c}", start + len));
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("rank ≥ 1") = len;
        let data = self.value(x).data().chunks(c).flat_map(|r| r[start..start + len].iter().copied()).collect();
        self.push(Tensor::new(&shape, data)?, Op::SliceCols { x, start }, &[x])
    }

    /// Select rows (trailing-axis slices) by index; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, c) = (self.value(x).rows(), self.value(x).last_dim());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(dim_err!("row index {bad} out of {rows}"));
        }
        let src = self.value(x).data();
        let data = index.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        let out = Tensor::new(&[index.len(), c], data)?;
        self.push(out, Op::GatherRows { x, index: index.to_vec() }, &[x])
    }

    /// Repeat each row `times` times consecutively: `[R, C] → [R·times, C]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(param_err!("repeat count must be positive"));
        }
        let (rows, c) = (self.value(x).rows(), self.value(x).last_dim());
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * times * c);
        for r in 0..rows {
            for _ in 0..times {
                data.extend_from_slice(&src[r * c..(r + 1) * c]);
            }
        }
        self.push(Tensor::new(&[rows * times, c], data)?, Op::RepeatRows { x, times }, &[x])
    }

    /// Tile the whole row block `times` times: `[R, C] → [times·R, C]`.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(param_err!("tile count must be positive"));
        }
        let (rows, c) = (self.value(x).rows(), self.value(x).last_dim());
        let data = self.value(x).data().repeat(times);
        self.push(Tensor::new(&[rows * times, c], data)?, Op::TileRows { x, times }, &[x])
    }

    // ---- backward ---------------------------------------------------------

    /// Populate gradients of every node that `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        self.visited = 0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.visited += 1;
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(buf) = self.acc(v) {
            f(buf);
        }
    }

    fn acc_slice(&mut self, v: Var, delta: &[f64]) {
        self.acc_with(v, |buf| {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        });
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Pull out whatever the op needs before mutably borrowing grads.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_slice(*a, g);
                self.acc_slice(*b, g);
            }
            Op::Sub(a, b) => {
                self.acc_slice(*a, g);
                self.acc_with(*b, |buf| buf.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                self.acc_with(*a, |buf| {
                    for ((x, d), y) in buf.iter_mut().zip(g).zip(&bv) {
                        *x += d * y;
                    }
                });
                self.acc_with(*b, |buf| {
                    for ((x, d), y) in buf.iter_mut().zip(g).zip(&av) {
                        *x += d * y;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc_with(*a, |buf| buf.iter_mut().zip(g).for_each(|(x, d)| *x += c * d));
            }
            Op::AddBias(x, b) => {
                self.acc_slice(*x, g);
                let c = self.nodes[b.0].value.len();
                self.acc_with(*b, |buf| {
                    for row in g.chunks(c) {
                        for (x, d) in buf.iter_mut().zip(row) {
                            *x += d;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(&self.nodes[a.0].value).expect("rank 2");
                let n = self.nodes[b.0].value.shape()[1];
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    self.acc_with(*a, |buf| gemm(m, n, k, g, Layout::N, &bv, Layout::T, buf, 1.0));
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data().to_vec();
                    self.acc_with(*b, |buf| gemm(k, m, n, &av, Layout::T, g, Layout::N, buf, 1.0));
                }
            }
            Op::Reshape(x) => self.acc_slice(*x, g),
            Op::Exp(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_with(*x, |buf| {
                    for ((b, d), y) in buf.iter_mut().zip(g).zip(&y) {
                        *b += d * y;
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_with(*x, |buf| {
                    for ((b, d), y) in buf.iter_mut().zip(g).zip(&y) {
                        *b += d * y * (1.0 - y);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.data().to_vec();
                self.acc_with(*x, |buf| {
                    for ((b, d), v) in buf.iter_mut().zip(g).zip(&xv) {
                        *b += d * gelu(*v).1;
                    }
                });
            }
            Op::Sum(x) => {
                let d = g[0];
                self.acc_with(*x, |buf| buf.iter_mut().for_each(|b| *b += d));
            }
            Op::Mean(x) => {
                let d = g[0] / self.nodes[x.0].value.len() as f64;
                self.acc_with(*x, |buf| buf.iter_mut().for_each(|b| *b += d));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = self.nodes[gamma.0].value.data().to_vec();
                let c = gam.len();
                self.acc_with(*beta, |buf| {
                    for row in g.chunks(c) {
                        buf.iter_mut().zip(row).for_each(|(b, d)| *b += d);
                    }
                });
                self.acc_with(*gamma, |buf| {
                    for (row, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            buf[j] += row[j] * xh[j];
                        }
                    }
                });
                self.acc_with(*x, |buf| {
                    for (r, ((row, xh), out)) in
                        g.chunks(c).zip(xhat.chunks(c)).zip(buf.chunks_mut(c)).enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = row[j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            out[j] += rstd[r] * (row[j] * gam[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Softmax { x, tau } => {
                let y = self.nodes[i].value.data().to_vec();
                let c = self.nodes[i].value.last_dim();
                let tau = *tau;
                self.acc_with(*x, |buf| {
                    for ((out, dy), yr) in buf.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = dy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[j] += yr[j] * (dy[j] - dot) / tau;
                        }
                    }
                });
            }
            Op::LogSoftmax { x, tau } => {
                let y = self.nodes[i].value.data().to_vec();
                let c = self.nodes[i].value.last_dim();
                let tau = *tau;
                self.acc_with(*x, |buf| {
                    for ((out, dy), yr) in buf.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let total: f64 = dy.iter().sum();
                        for j in 0..c {
                            out[j] += (dy[j] - yr[j].exp() * total) / tau;
                        }
                    }
                });
            }
            Op::CrossEntropy { target, pred } => {
                let p = self.nodes[pred.0].value.data().to_vec();
                let d = g[0];
                self.acc_with(*pred, |buf| {
                    for ((b, &a), &pv) in buf.iter_mut().zip(target.data()).zip(&p) {
                        if pv > PROB_CLAMP {
                            *b -= d * a / pv;
                        }
                    }
                });
            }
            Op::Attention { q, k, v, geom, probs } => {
                let (dq, dk, dv) = attention::backward(
                    geom,
                    self.nodes[q.0].value.data(),
                    self.nodes[k.0].value.data(),
                    self.nodes[v.0].value.data(),
                    probs,
                    g,
                );
                self.acc_slice(*q, &dq);
                self.acc_slice(*k, &dk);
                self.acc_slice(*v, &dv);
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (pix, pl, oc) = (geom.out_pixels(), geom.patch_len(), geom.out_ch);
                if self.nodes[w.0].requires_grad {
                    self.acc_with(*w, |buf| gemm(pl, pix, oc, cols, Layout::T, g, Layout::N, buf, 1.0));
                }
                if self.nodes[x.0].requires_grad {
                    let wv = self.nodes[w.0].value.data().to_vec();
                    let mut dcols = vec![0.0; pix * pl];
                    gemm(pix, oc, pl, g, Layout::N, &wv, Layout::T, &mut dcols, 0.0);
                    let geom = *geom;
                    self.acc_with(*x, |buf| conv::col2im(&geom, &dcols, buf));
                }
            }
            Op::Upsample2x(x) => {
                let &[b, h, w, c] = self.nodes[x.0].value.shape() else { unreachable!() };
                self.acc_with(*x, |buf| {
                    for bi in 0..b {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let s = ((bi * h + y / 2) * w + xx / 2) * c;
                                let d = ((bi * 2 * h + y) * 2 * w + xx) * c;
                                for ch in 0..c {
                                    buf[s + ch] += g[d + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].value.len();
                self.acc_slice(*a, &g[..na]);
                self.acc_slice(*b, &g[na..]);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[a.0].value.last_dim();
                let cb = self.nodes[b.0].value.last_dim();
                self.acc_with(*a, |buf| {
                    for (out, row) in buf.chunks_mut(ca).zip(g.chunks(ca + cb)) {
                        out.iter_mut().zip(&row[..ca]).for_each(|(o, d)| *o += d);
                    }
                });
                self.acc_with(*b, |buf| {
                    for (out, row) in buf.chunks_mut(cb).zip(g.chunks(ca + cb)) {
                        out.iter_mut().zip(&row[ca..]).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.nodes[x.0].value.last_dim();
                let len = self.nodes[i].value.last_dim();
                let start = *start;
                self.acc_with(*x, |buf| {
                    for (out, row) in buf.chunks_mut(c).zip(g.chunks(len)) {
                        out[start..start + len].iter_mut().zip(row).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let c = self.nodes[x.0].value.last_dim();
                self.acc_with(*x, |buf| {
                    for (row, &src) in g.chunks(c).zip(index) {
                        buf[src * c..(src + 1) * c].iter_mut().zip(row).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::RepeatRows { x, times } => {
                let c = self.nodes[x.0].value.last_dim();
                let times = *times;
                self.acc_with(*x, |buf| {
                    for (r, out) in buf.chunks_mut(c).enumerate() {
                        for t in 0..times {
                            let row = &g[(r * times + t) * c..(r * times + t + 1) * c];
                            out.iter_mut().zip(row).for_each(|(o, d)| *o += d);
                        }
                    }
                });
            }
            Op::TileRows { x, times } => {
                let n = self.nodes[x.0].value.len();
                let times = *times;
                self.acc_with(*x, |buf| {
                    for t in 0..times {
                        buf.iter_mut().zip(&g[t * n..(t + 1) * n]).for_each(|(o, d)| *o += d);
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(param_err!("temperature must be positive, got {tau}"));
    }
    Ok(())
}

fn check_probabilities(t: &Tensor, what: &str) -> Result<()> {
    for row in t.data().chunks(t.last_dim()) {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Contract(format!("{what} is not a probability vector (sum {total})")));
        }
    }
    Ok(())
}

/// Untaped softmax of `logits / tau` along the trailing axis.
pub fn softmax_temperature(logits: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let c = logits.last_dim();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        row.iter_mut().for_each(|v| *v /= tau);
        attention::softmax_in_place(row);
    }
    Ok(out)
}

/// Untaped `H(a, b) = −Σ a log b` for a single pair of probability vectors.
pub fn cross_entropy(target: &Tensor, pred: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let h = tape.cross_entropy(target, p)?;
    Ok(tape.value(h).item())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU (tanh form) and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

#[cfg(test)]
mod tests;
