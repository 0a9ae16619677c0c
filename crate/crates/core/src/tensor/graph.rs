use std::collections::{BTreeMap, HashMap};

use super::kernels;
use super::Tensor;
use crate::error::{Result, SanError};
use crate::objective::{triplet_value_and_grad, NegativeMode};
use crate::params::ParamStore;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Per-parameter gradients keyed by parameter name.
pub type GradientMap = BTreeMap<String, Tensor>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Prelu(Var, Var),
    Softmax(Var, usize),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    MeanAxis(Var, usize),
    Sum(Var),
    Reshape(Var),
    Row(Var, usize),
    GatherColumns(Var, Vec<usize>),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    AvgPool2d(Var, usize, usize),
    Upsample(Var, usize, usize),
    NormalizeSum(Var),
    Cosine(Var, Var),
    BceWithLogits(Var, Tensor),
    Triplet(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation graph. Each forward pass records its nodes in
/// creation order, which is a topological order by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
    faulty_tanh: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose tanh adjoint is deliberately wrong. Used to check that
    /// the gradient checker actually detects broken backward rules.
    pub fn with_faulty_tanh() -> Self {
        Graph {
            faulty_tanh: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest `|x|` fed into a ReLU or PReLU node, the distance of the
    /// current point from the nearest kink. Infinite when there is none.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) | Op::Prelu(x, _) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Non-parameter input whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a named trainable parameter. Repeated registrations of the
    /// same name return the same node, so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_lookup.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| SanError::Usage(format!("unknown parameter {name:?}")))?
            .clone();
        let v = self.push(t, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        self.param_lookup.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of the parameters registered so far, in registration order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let out = kernels::matvec(self.value(w), self.value(x))?;
        let g = self.grad_any(&[w, x]);
        Ok(self.push(out, Op::MatVec(w, x), g))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = kernels::transpose(self.value(a))?;
        let g = self.grad_any(&[a]);
        Ok(self.push(out, Op::Transpose(a), g))
    }

    /// Elementwise binary op where `b` is either the same shape as `a`, a
    /// trailing suffix of it, or a single element.
    fn broadcast(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta.shape(), tb.shape()) {
            return Err(SanError::shape(op, ta.shape(), tb.shape()));
        }
        let inner = tb.len();
        Ok(ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % inner]))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.broadcast(a, b, "add", |x, y| x + y)?;
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        let g = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.broadcast(a, b, "sub", |x, y| x - y)?;
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        let g = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.broadcast(a, b, "mul", |x, y| x * y)?;
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        let g = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        let g = self.grad_any(&[a]);
        self.push(out, Op::Scale(a, c), g)
    }

    /// Elementwise mean of two same-shaped nodes.
    pub fn average(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(SanError::shape("average", self.shape(a), self.shape(b)));
        }
        let s = self.add(a, b)?;
        Ok(self.scale(s, 0.5))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::sigmoid);
        let g = self.grad_any(&[a]);
        self.push(out, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let g = self.grad_any(&[a]);
        self.push(out, Op::Tanh(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let g = self.grad_any(&[a]);
        self.push(out, Op::Relu(a), g)
    }

    /// PReLU with one slope per leading-axis channel (`slope` has shape
    /// `[C]`, or `[1]` for a shared slope).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(slope));
        let c = tx.shape()[0];
        if ts.rank() != 1 || (ts.len() != c && ts.len() != 1) {
            return Err(SanError::shape("prelu", tx.shape(), ts.shape()));
        }
        let per = tx.len() / c;
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let a = ts.data()[if ts.len() == 1 { 0 } else { i / per }];
                if v >= 0.0 {
                    v
                } else {
                    a * v
                }
            })
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let g = self.grad_any(&[x, slope]);
        Ok(self.push(out, Op::Prelu(x, slope), g))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(a), axis)?;
        let g = self.grad_any(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), g))
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| SanError::Usage("concat of nothing".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(SanError::shape("concat", self.shape(first), t.shape()));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let g = self.grad_any(parts);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), g))
    }

    /// Stacks same-shaped nodes along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| SanError::Usage("stack of nothing".into()))?;
        let inner = self.shape(first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(first).len());
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(SanError::shape("stack", &inner, self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        if inner != [1] {
            shape.extend(inner);
        }
        let g = self.grad_any(parts);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Stack(parts.to_vec()), g))
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis)?;
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + j) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        let mut shape: Vec<usize> = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let g = self.grad_any(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis(a, axis), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let g = self.grad_any(&[a]);
        self.push(out, Op::Sum(a), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let g = self.grad_any(&[a]);
        Ok(self.push(out, Op::Reshape(a), g))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        let [m, n] = *t.shape() else {
            return Err(SanError::Config(format!("row() needs a matrix, got {:?}", t.shape())));
        };
        if i >= m {
            return Err(SanError::Usage(format!("row {i} out of range for {m} rows")));
        }
        let out = Tensor::vector(&t.data()[i * n..(i + 1) * n]);
        let g = self.grad_any(&[a]);
        Ok(self.push(out, Op::Row(a, i), g))
    }

    /// Column lookup: `w` is `[e×V]`, result is `[L×e]` with row `l` equal to
    /// column `ids[l]` of `w`.
    pub fn gather_columns(&mut self, w: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(w);
        let [e, vocab] = *t.shape() else {
            return Err(SanError::Config(format!("gather_columns needs a matrix, got {:?}", t.shape())));
        };
        if ids.is_empty() {
            return Err(SanError::Usage("gather_columns with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= vocab {
                return Err(SanError::Data(format!("token id {id} out of range for vocabulary of {vocab}")));
            }
            data.extend((0..e).map(|r| t.data()[r * vocab + id]));
        }
        let out = Tensor::from_parts(vec![ids.len(), e], data);
        let g = self.grad_any(&[w]);
        Ok(self.push(out, Op::GatherColumns(w, ids.to_vec()), g))
    }

    /// Cross-correlation with optional per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let mut out = kernels::conv2d(self.value(input), self.value(kernels), stride, padding)?;
        if let Some(b) = bias {
            let tb = self.value(b);
            let k = out.shape()[0];
            if tb.shape() != [k] {
                return Err(SanError::shape("conv2d bias", out.shape(), tb.shape()));
            }
            let plane = out.len() / k;
            let bd = tb.data().to_vec();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += bd[i / plane];
            }
        }
        let mut deps = vec![input, kernels];
        deps.extend(bias);
        let g = self.grad_any(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
            g,
        ))
    }

    pub fn avg_pool2d(&mut self, a: Var, sh: usize, sw: usize) -> Result<Var> {
        let out = kernels::avg_pool2d(self.value(a), sh, sw)?;
        let g = self.grad_any(&[a]);
        Ok(self.push(out, Op::AvgPool2d(a, sh, sw), g))
    }

    pub fn upsample_nearest(&mut self, a: Var, fh: usize, fw: usize) -> Result<Var> {
        let out = kernels::upsample_nearest(self.value(a), fh, fw)?;
        let g = self.grad_any(&[a]);
        Ok(self.push(out, Op::Upsample(a, fh, fw), g))
    }

    /// `x / Σx`. Callers guarantee a strictly positive sum.
    pub fn normalize_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.sum();
        if !(s > 0.0) {
            return Err(SanError::Numeric(format!("normalize_sum: non-positive total {s}")));
        }
        let out = t.map(|x| x / s);
        let g = self.grad_any(&[a]);
        Ok(self.push(out, Op::NormalizeSum(a), g))
    }

    /// Cosine similarity of two vectors, clamped to `[-1, 1]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = cosine_parts(self.value(a), self.value(b))?.0;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(Tensor::scalar(c.clamp(-1.0, 1.0)), Op::Cosine(a, b), g))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and a `{0,1}`
    /// target of the same shape.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != target.shape() {
            return Err(SanError::shape("bce_with_logits", t.shape(), target.shape()));
        }
        if target.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(SanError::Data("mask values must be 0 or 1".into()));
        }
        let n = t.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| kernels::softplus(x) - y * x)
            .sum::<f64>()
            / n;
        let g = self.grad_any(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits(logits, target.clone()), g))
    }

    /// Bidirectional hinge loss over a `[B×B]` similarity matrix whose
    /// diagonal holds the matched pairs.
    pub fn triplet_loss(&mut self, sim: Var, margin: f64, mode: NegativeMode) -> Result<Var> {
        let (loss, grad) = triplet_value_and_grad(self.value(sim), margin, mode)?;
        let g = self.grad_any(&[sim]);
        Ok(self.push(Tensor::scalar(loss), Op::Triplet(sim, grad), g))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(SanError::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_from(&[(loss, Tensor::ones(t.shape()))])
    }

    /// Reverse pass seeded with explicit output adjoints (a vector-Jacobian
    /// product).
    pub fn backward_from(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, t) in seeds {
            if self.shape(*v) != t.shape() {
                return Err(SanError::shape("backward seed", self.shape(*v), t.shape()));
            }
            accumulate(&mut grads, v.0, t.clone());
            last = last.max(v.0);
        }
        if seeds.is_empty() {
            return Ok(self.gradients(grads));
        }

        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(self.gradients(grads))
    }

    fn gradients(&self, grads: Vec<Option<Tensor>>) -> Gradients {
        let params = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
                (name.clone(), g)
            })
            .collect();
        Gradients { grads, params }
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if self.nodes[to.0].needs_grad {
            accumulate(grads, to.0, g);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let bt = kernels::transpose(self.value(*b))?;
                    self.send(grads, *a, kernels::matmul(g, &bt)?);
                }
                if self.wants(*b) {
                    let at = kernels::transpose(self.value(*a))?;
                    self.send(grads, *b, kernels::matmul(&at, g)?);
                }
            }
            Op::MatVec(w, x) => {
                let (tw, tx) = (self.value(*w), self.value(*x));
                let (m, n) = (tw.shape()[0], tw.shape()[1]);
                if self.wants(*w) {
                    let mut gw = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            gw[i * n + j] = g.data()[i] * tx.data()[j];
                        }
                    }
                    self.send(grads, *w, Tensor::from_parts(vec![m, n], gw));
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; n];
                    for i in 0..m {
                        let gi = g.data()[i];
                        for (o, &wv) in gx.iter_mut().zip(&tw.data()[i * n..(i + 1) * n]) {
                            *o += gi * wv;
                        }
                    }
                    self.send(grads, *x, Tensor::from_parts(vec![n], gx));
                }
            }
            Op::Transpose(a) => self.send(grads, *a, kernels::transpose(g)?),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.send(grads, *a, g.clone());
                if self.wants(*b) {
                    let gb = reduce_broadcast(g, self.shape(*b)).map(|v| sign * v);
                    self.send(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let inner = tb.len();
                if self.wants(*a) {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * tb.data()[i % inner])
                        .collect();
                    self.send(grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; inner];
                    for (i, (&gv, &av)) in g.data().iter().zip(ta.data()).enumerate() {
                        d[i % inner] += gv * av;
                    }
                    self.send(grads, *b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::Scale(a, c) => self.send(grads, *a, g.map(|v| c * v)),
            Op::Sigmoid(a) => self.send(grads, *a, zip_map(g, y, |gv, s| gv * s * (1.0 - s))),
            Op::Tanh(a) => {
                let gx = if self.faulty_tanh {
                    zip_map(g, y, |gv, t| gv * (1.0 - t))
                } else {
                    zip_map(g, y, |gv, t| gv * (1.0 - t * t))
                };
                self.send(grads, *a, gx);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.send(grads, *a, zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Prelu(x, slope) => {
                let (tx, ts) = (self.value(*x), self.value(*slope));
                let c = tx.shape()[0];
                let per = tx.len() / c;
                let shared = ts.len() == 1;
                let ch = |i: usize| if shared { 0 } else { i / per };
                if self.wants(*x) {
                    let d = g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .enumerate()
                        .map(|(i, (&gv, &xv))| if xv >= 0.0 { gv } else { gv * ts.data()[ch(i)] })
                        .collect();
                    self.send(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
                }
                if self.wants(*slope) {
                    let mut d = vec![0.0; ts.len()];
                    for (i, (&gv, &xv)) in g.data().iter().zip(tx.data()).enumerate() {
                        if xv < 0.0 {
                            d[ch(i)] += gv * xv;
                        }
                    }
                    self.send(grads, *slope, Tensor::from_parts(ts.shape().to_vec(), d));
                }
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = kernels::axis_split(y.shape(), *axis)?;
                let (yd, gd) = (y.data(), g.data());
                let mut d = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[idx(j)] * yd[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.send(grads, *a, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::Concat(parts) | Op::Stack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let piece = g.data()[offset..offset + n].to_vec();
                        self.send(grads, p, Tensor::from_parts(self.shape(p).to_vec(), piece));
                    }
                    offset += n;
                }
            }
            Op::MeanAxis(a, axis) => {
                let ta = self.value(*a);
                let (outer, len, inner) = kernels::axis_split(ta.shape(), *axis)?;
                let mut d = vec![0.0; ta.len()];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] = g.data()[o * inner + i] / len as f64;
                        }
                    }
                }
                self.send(grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.send(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.send(grads, *a, g.clone().reshape(&shape)?);
            }
            Op::Row(a, i) => {
                let shape = self.shape(*a).to_vec();
                let n = shape[1];
                let mut d = Tensor::zeros(&shape);
                d.data_mut()[i * n..(i + 1) * n].copy_from_slice(g.data());
                self.send(grads, *a, d);
            }
            Op::GatherColumns(w, ids) => {
                let shape = self.shape(*w).to_vec();
                let (e, vocab) = (shape[0], shape[1]);
                let mut d = Tensor::zeros(&shape);
                for (l, &id) in ids.iter().enumerate() {
                    for r in 0..e {
                        d.data_mut()[r * vocab + id] += g.data()[l * e + r];
                    }
                }
                self.send(grads, *w, d);
            }
            Op::Conv2d {
                input,
                kernels: k,
                bias,
                stride,
                padding,
            } => {
                if self.wants(*input) || self.wants(*k) {
                    let (gi, gk) =
                        kernels::conv2d_backward(self.value(*input), self.value(*k), g, *stride, *padding)?;
                    self.send(grads, *input, gi);
                    self.send(grads, *k, gk);
                }
                if let Some(b) = bias {
                    let kc = g.shape()[0];
                    let plane = g.len() / kc;
                    let d = (0..kc)
                        .map(|c| g.data()[c * plane..(c + 1) * plane].iter().sum())
                        .collect();
                    self.send(grads, *b, Tensor::from_parts(vec![kc], d));
                }
            }
            Op::AvgPool2d(a, sh, sw) => {
                let gx = kernels::avg_pool2d_backward(self.shape(*a), g, *sh, *sw);
                self.send(grads, *a, gx);
            }
            Op::Upsample(a, fh, fw) => {
                let gx = kernels::upsample_nearest_backward(self.shape(*a), g, *fh, *fw);
                self.send(grads, *a, gx);
            }
            Op::NormalizeSum(a) => {
                let s = self.value(*a).sum();
                let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                self.send(grads, *a, g.map(|gv| (gv - dot) / s));
            }
            Op::Cosine(a, b) => {
                let gv = g.data()[0];
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (c, na, nb) = cosine_parts(ta, tb)?;
                if self.wants(*a) {
                    let d = zip_map(tb, ta, |bv, av| gv * (bv / (na * nb) - c * av / (na * na)));
                    self.send(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = zip_map(ta, tb, |av, bv| gv * (av / (na * nb) - c * bv / (nb * nb)));
                    self.send(grads, *b, d);
                }
            }
            Op::BceWithLogits(a, target) => {
                let gv = g.data()[0];
                let x = self.value(*a);
                let n = x.len() as f64;
                let d = zip_map(x, target, |xv, t| gv * (kernels::sigmoid(xv) - t) / n);
                self.send(grads, *a, d);
            }
            Op::Triplet(a, local) => {
                let gv = g.data()[0];
                self.send(grads, *a, local.map(|v| gv * v));
            }
        }
        Ok(())
    }
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b == [1] || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

fn reduce_broadcast(g: &Tensor, shape: &[usize]) -> Tensor {
    let inner: usize = shape.iter().product();
    if inner == g.len() {
        return Tensor::from_parts(shape.to_vec(), g.data().to_vec());
    }
    let mut d = vec![0.0; inner];
    for (i, &v) in g.data().iter().enumerate() {
        d[i % inner] += v;
    }
    Tensor::from_parts(shape.to_vec(), d)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), d)
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Unclamped cosine plus both norms.
pub(crate) fn cosine_parts(a: &Tensor, b: &Tensor) -> Result<(f64, f64, f64)> {
    if a.rank() != 1 || a.shape() != b.shape() {
        return Err(SanError::shape("cosine", a.shape(), b.shape()));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(SanError::Numeric(format!(
            "cosine of a degenerate vector (norms {na:e}, {nb:e})"
        )));
    }
    Ok((dot / (na * nb), na, nb))
}

/// Result of a reverse pass: adjoints for every node plus a name-keyed view
/// of the parameter adjoints.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: GradientMap,
}

impl Gradients {
    /// Adjoint of an arbitrary node, `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every registered parameter; unreached ones are zero.
    pub fn params(&self) -> &GradientMap {
        &self.params
    }

    pub fn into_params(self) -> GradientMap {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(n, t.clone());
        }
        s
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let ps = store(&[("p", Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap())]);
        let mut g = Graph::new();
        let p = g.param(&ps, "p").unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.params()["p"], Tensor::ones(&[2, 3]));
    }

    #[test]
    fn quadratic_gradient() {
        let ps = store(&[("p", Tensor::vector(&[1.0, 2.0]))]);
        let mut g = Graph::new();
        let p = g.param(&ps, "p").unwrap();
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.params()["p"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(SanError::Usage(_))));
    }

    #[test]
    fn unreached_parameters_get_zero_gradient() {
        let ps = store(&[("a", Tensor::vector(&[1.0])), ("b", Tensor::vector(&[3.0, 4.0]))]);
        let mut g = Graph::new();
        let a = g.param(&ps, "a").unwrap();
        let _b = g.param(&ps, "b").unwrap();
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.params()["b"], Tensor::zeros(&[2]));
    }

    #[test]
    fn repeated_registration_shares_node() {
        let ps = store(&[("a", Tensor::vector(&[2.0]))]);
        let mut g = Graph::new();
        let a1 = g.param(&ps, "a").unwrap();
        let a2 = g.param(&ps, "a").unwrap();
        assert_eq!(a1, a2);
        let prod = g.mul(a1, a2).unwrap();
        let loss = g.sum(prod);
        assert_eq!(g.backward(loss).unwrap().params()["a"].data(), &[4.0]);
    }

    #[test]
    fn broadcast_add_accumulates_bias_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3, 2]));
        let b = g.leaf(Tensor::vector(&[1.0, -1.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
        assert!(g.add(b, x).is_err());
    }

    #[test]
    fn gather_columns_gradient_hits_only_looked_up_columns() {
        let ps = store(&[("w", Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap())]);
        let mut g = Graph::new();
        let w = g.param(&ps, "w").unwrap();
        let e = g.gather_columns(w, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e).data(), &[2.0, 6.0, 0.0, 4.0, 2.0, 6.0]);
        let loss = g.sum(e);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.params()["w"].data(), &[1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        assert!(matches!(g.gather_columns(w, &[4]), Err(SanError::Data(_))));
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(&[0.0, 0.0]));
        let b = g.leaf(Tensor::vector(&[1.0, 0.0]));
        assert!(matches!(g.cosine(a, b), Err(SanError::Numeric(_))));
    }

    #[test]
    fn bce_rejects_non_binary_mask() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(
            g.bce_with_logits(x, &Tensor::vector(&[0.0, 0.5])),
            Err(SanError::Data(_))
        ));
    }

    #[test]
    fn backward_from_seed_is_a_vjp() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let x = g.leaf(Tensor::vector(&[1.0, 1.0]));
        let y = g.matvec(w, x).unwrap();
        let grads = g.backward_from(&[(y, Tensor::vector(&[1.0, 0.0]))]).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }
}
