//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value and the inputs it read. Nodes are
//! only ever appended, so the tape is always in topological order; [`Tape::backward`] walks it
//! from the loss towards the leaves and accumulates gradients.
//!
//! Broadcasting in [`Tape::add`], [`Tape::sub`] and [`Tape::mul`] is limited to the right-hand
//! operand: after left-padding its shape with ones to the rank of the left operand, every
//! dimension must either equal the left operand's or be 1.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec, PoolSpec};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Relu(Var),
    MatMul(Var, Var),
    Softmax { x: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, spec: ConvSpec },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, spec: PoolSpec },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    GlobalAvgPool(Var),
    ConcatChannels(Vec<Var>),
    ShiftCrop(Var),
    WeightedSum { inputs: Vec<Var>, weights: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate (divides by `n - 1`).
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of a scalar loss with respect to every node of the tape that produced it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero if `v` is not on a path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Adds every parameter leaf's gradient into the matching store gradient buffer.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(var, id) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                let p = store.get_mut(id);
                if p.requires_grad {
                    p.grad.add_assign(g);
                }
            }
        }
    }
}

/// Strides of `b` (padded to `rank`) with zero stride on broadcast dimensions.
fn broadcast_strides(a: &[usize], b: &[usize]) -> Result<Option<Vec<usize>>> {
    if a == b {
        return Ok(None);
    }
    let mismatch = || Error::Shape(format!("cannot broadcast {b:?} onto {a:?}"));
    if b.len() > a.len() {
        return Err(mismatch());
    }
    let mut padded = vec![1; a.len() - b.len()];
    padded.extend_from_slice(b);
    let mut strides = vec![0; a.len()];
    let mut stride = 1;
    for i in (0..a.len()).rev() {
        if padded[i] == a[i] {
            strides[i] = stride;
        } else if padded[i] != 1 {
            return Err(mismatch());
        }
        stride *= padded[i];
    }
    Ok(Some(strides))
}

/// For each flat index of a tensor of shape `a`, the flat index in the broadcast operand.
fn broadcast_index(a: &[usize], strides: &[usize]) -> Vec<usize> {
    let numel: usize = a.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut counter = vec![0usize; a.len()];
    let mut idx = 0usize;
    for _ in 0..numel {
        out.push(idx);
        for d in (0..a.len()).rev() {
            counter[d] += 1;
            idx += strides[d];
            if counter[d] < a[d] {
                break;
            }
            idx -= strides[d] * a[d];
            counter[d] = 0;
        }
    }
    out
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (xd[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("softmax keeps shape")
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked, for differentiating with respect to inputs.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a parameter leaf. Recording the same id twice returns the same var, so shared
    /// parameters accumulate gradient from every use.
    pub fn param(&mut self, id: ParamId, value: &Tensor, requires_grad: bool) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, requires_grad);
        self.param_vars.insert(id, v);
        v
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let strides = broadcast_strides(av.shape(), bv.shape())?;
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let data: Vec<f64> = match strides {
            None => av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            Some(s) => {
                let idx = broadcast_index(av.shape(), &s);
                av.data().iter().zip(idx).map(|(&x, j)| f(x, bv.data()[j])).collect()
            }
        };
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = match (av.shape(), bv.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}"))),
        };
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                let row = &bd[p * n..][..n];
                for (o, &bpj) in out[i * n..][..n].iter_mut().zip(row) {
                    *o += aip * bpj;
                }
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::Shape(format!("softmax axis {axis} for shape {:?}", xv.shape())));
        }
        let value = softmax_forward(xv, axis);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (batch, classes) = match *lv.shape() {
            [b, c] => (b, c),
            ref s => return Err(Error::Shape(format!("cross_entropy expects [batch, classes], got {s:?}"))),
        };
        if labels.len() != batch {
            return Err(Error::Shape(format!("{} labels for batch of {batch}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        let probs = softmax_forward(lv, 1).into_data();
        let ld = lv.data();
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &ld[i * classes..][..classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        let value = Tensor::scalar(loss / batch as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let value = kernels::conv2d(self.value(x), self.value(w), &spec)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::Conv2d { x, w, spec }, rg))
    }

    pub fn max_pool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let (value, argmax) = kernels::max_pool2d(self.value(x), &spec)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn avg_pool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let value = kernels::avg_pool2d(self.value(x), &spec)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AvgPool { x, spec }, rg))
    }

    /// Per-channel normalization over `(B, H, W)` using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let [b, c, h, w] = kernels::dims4(self.value(x), "batch_norm")?;
        let n = b * h * w;
        if n < 2 {
            return Err(Error::Shape(format!(
                "training-mode batch_norm needs at least 2 values per channel, got {n}"
            )));
        }
        self.check_channel_vec(gamma, c)?;
        self.check_channel_vec(beta, c)?;
        let xd = self.value(x).data();
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += xd[(bi * c + ch) * plane..][..plane].iter().sum::<f64>();
            }
            let m = s / n as f64;
            let mut ss = 0.0;
            for bi in 0..b {
                ss += xd[(bi * c + ch) * plane..][..plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = ss / n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let var_unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
        let (out, xhat) = self.normalize(x, gamma, beta, &mean, &inv_std, c, plane);
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: true }, rg);
        Ok((v, BatchStats { mean, var_unbiased }))
    }

    /// Per-channel affine normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let [_, c, h, w] = kernels::dims4(self.value(x), "batch_norm")?;
        self.check_channel_vec(gamma, c)?;
        self.check_channel_vec(beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("batch_norm running stats of length {} for {c} channels", mean.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.normalize(x, gamma, beta, mean, &inv_std, c, h * w);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: false }, rg))
    }

    fn check_channel_vec(&self, v: Var, c: usize) -> Result<()> {
        let n = self.value(v).numel();
        if n != c {
            return Err(Error::Shape(format!("per-channel vector of length {n} for {c} channels")));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64], c: usize, plane: usize) -> (Tensor, Vec<f64>) {
        let xv = self.value(x);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        for (i, &v) in xv.data().iter().enumerate() {
            let ch = (i / plane) % c;
            let xh = (v - mean[ch]) * inv_std[ch];
            xhat[i] = xh;
            out[i] = g[ch] * xh + bt[ch];
        }
        (Tensor::new(xv.shape(), out).expect("same shape"), xhat)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = kernels::dims4(self.value(x), "global_avg_pool")?;
        let plane = h * w;
        let xd = self.value(x).data();
        let data = (0..b * c).map(|i| xd[i * plane..][..plane].iter().sum::<f64>() / plane as f64).collect();
        let value = Tensor::new(&[b, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let [b, _, h, w] = kernels::dims4(self.value(first), "concat_channels")?;
        let mut total_c = 0;
        for &v in xs {
            let [vb, vc, vh, vw] = kernels::dims4(self.value(v), "concat_channels")?;
            if (vb, vh, vw) != (b, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: {:?} vs {:?}",
                    self.value(v).shape(),
                    self.value(first).shape()
                )));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total_c * plane);
        for bi in 0..b {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[bi * c * plane..][..c * plane]);
            }
        }
        let value = Tensor::new(&[b, total_c, h, w], data)?;
        let rg = self.rg(xs);
        Ok(self.push(value, Op::ConcatChannels(xs.to_vec()), rg))
    }

    /// `y[.., i, j] = x[.., i + 1, j + 1]`, zero where that falls outside `x`.
    pub fn shift_crop(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = kernels::dims4(self.value(x), "shift_crop")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..h.saturating_sub(1) {
                for j in 0..w.saturating_sub(1) {
                    out[base + i * w + j] = xd[base + (i + 1) * w + j + 1];
                }
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ShiftCrop(x), rg))
    }

    /// `Σ_i weights[i] · inputs[i]` over equally shaped inputs.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        let wv = self.value(weights).data();
        if wv.len() != inputs.len() || inputs.is_empty() {
            return Err(Error::Shape(format!("{} weights for {} inputs", wv.len(), inputs.len())));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        let mut out = vec![0.0; shape.iter().product()];
        for (&v, &wi) in inputs.iter().zip(wv) {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("weighted_sum operand {:?} vs {shape:?}", t.shape())));
            }
            for (o, &x) in out.iter_mut().zip(t.data()) {
                *o += wi * x;
            }
        }
        let value = Tensor::new(&shape, out)?;
        let mut deps = inputs.to_vec();
        deps.push(weights);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::WeightedSum { inputs: inputs.to_vec(), weights }, rg))
    }

    /// Gradients of a scalar `loss` with respect to every node recorded so far.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Shape(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient keeps shape")))
            .collect();
        let params = self.param_vars.iter().map(|(&id, &v)| (v, id)).collect();
        Ok(Gradients { grads, shapes, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.wants(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Binary { kind, a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let strides = broadcast_strides(av.shape(), bv.shape())?;
                let idx: Option<Vec<usize>> = strides.map(|s| broadcast_index(av.shape(), &s));
                let b_at = |i: usize| idx.as_ref().map_or(i, |ix| ix[i]);
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                        let sign = if *kind == BinaryKind::Add { 1.0 } else { -1.0 };
                        acc(*b, &|s| g.iter().enumerate().for_each(|(i, g)| s[b_at(i)] += sign * g));
                    }
                    BinaryKind::Mul => {
                        let (ad, bd) = (av.data(), bv.data());
                        acc(*a, &|s| g.iter().enumerate().for_each(|(i, g)| s[i] += g * bd[b_at(i)]));
                        acc(*b, &|s| g.iter().enumerate().for_each(|(i, g)| s[b_at(i)] += g * ad[i]));
                    }
                }
            }
            Op::Scale { x, factor } => acc(*x, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += factor * g)),
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        if xd[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (ad, bd) = (av.data(), bv.data());
                // dA = dC · Bᵀ
                acc(*a, &|s| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut t = 0.0;
                            for j in 0..n {
                                t += g[i * n + j] * bd[p * n + j];
                            }
                            s[i * k + p] += t;
                        }
                    }
                });
                // dB = Aᵀ · dC
                acc(*b, &|s| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            for j in 0..n {
                                s[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                s[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / batch as f64;
                acc(*logits, &|s| {
                    for (i, &label) in labels.iter().enumerate() {
                        for k in 0..classes {
                            let onehot = if k == label { 1.0 } else { 0.0 };
                            s[i * classes + k] += scale * (probs[i * classes + k] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, &|s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Conv2d { x, w, spec } => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &gt,
                    spec,
                    self.wants(*x),
                    self.wants(*w),
                )?;
                if let Some(dx) = dx {
                    acc(*x, &|s| s.iter_mut().zip(dx.data()).for_each(|(s, d)| *s += d));
                }
                if let Some(dw) = dw {
                    acc(*w, &|s| s.iter_mut().zip(dw.data()).for_each(|(s, d)| *s += d));
                }
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, &|s| argmax.iter().zip(g).for_each(|(&i, g)| s[i] += g));
            }
            Op::AvgPool { x, spec } => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                let dx = kernels::avg_pool2d_backward(self.value(*x).shape(), &gt, spec);
                acc(*x, &|s| s.iter_mut().zip(dx.data()).for_each(|(s, d)| *s += d));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let [b, c, h, w] = kernels::dims4(self.value(*x), "batch_norm")?;
                let plane = h * w;
                let n = (b * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = (i / plane) % c;
                    sum_g[ch] += gi;
                    sum_gx[ch] += gi * xh;
                }
                acc(*gamma, &|s| s.iter_mut().zip(&sum_gx).for_each(|(s, v)| *s += v));
                acc(*beta, &|s| s.iter_mut().zip(&sum_g).for_each(|(s, v)| *s += v));
                acc(*x, &|s| {
                    for (i, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
                        let ch = (i / plane) % c;
                        let k = gam[ch] * inv_std[ch];
                        s[i] += if *batch_stats {
                            k * (gi - sum_g[ch] / n - xh * sum_gx[ch] / n)
                        } else {
                            k * gi
                        };
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = kernels::dims4(self.value(*x), "global_avg_pool")?;
                let plane = h * w;
                acc(*x, &|s| {
                    for (i, s) in s.iter_mut().enumerate() {
                        *s += g[i / plane] / plane as f64;
                    }
                });
            }
            Op::ConcatChannels(xs) => {
                let [b, total_c, h, w] = kernels::dims4(&node.value, "concat_channels")?;
                let plane = h * w;
                let mut c_off = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    acc(v, &|s| {
                        for bi in 0..b {
                            let src = &g[(bi * total_c + c_off) * plane..][..c * plane];
                            let dst = &mut s[bi * c * plane..][..c * plane];
                            dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    });
                    c_off += c;
                }
            }
            Op::ShiftCrop(x) => {
                let [b, c, h, w] = kernels::dims4(self.value(*x), "shift_crop")?;
                acc(*x, &|s| {
                    for plane in 0..b * c {
                        let base = plane * h * w;
                        for i in 0..h.saturating_sub(1) {
                            for j in 0..w.saturating_sub(1) {
                                s[base + (i + 1) * w + j + 1] += g[base + i * w + j];
                            }
                        }
                    }
                });
            }
            Op::WeightedSum { inputs, weights } => {
                let wv = self.value(*weights).data();
                for (&v, &wi) in inputs.iter().zip(wv) {
                    acc(v, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += wi * g));
                }
                acc(*weights, &|s| {
                    for (k, &v) in inputs.iter().enumerate() {
                        s[k] += self.value(v).data().iter().zip(g).map(|(x, g)| x * g).sum::<f64>();
                    }
                });
            }
        }
        Ok(())
    }
}
