//! Reverse-mode differentiation over tensor-valued nodes.
//!
//! A [`Graph`] is an append-only list of nodes. Every node only refers to
//! nodes created before it, so the node order is a topological order and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//! Gradients reaching a node from several consumers are summed.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

/// Norms at or below this are treated as degenerate.
pub const EPS_NORM: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero-padding rule for [`Graph::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding: `T_out = floor((T - K) / stride) + 1`.
    Valid,
    /// Pad so that `T_out = ceil(T / stride)`; the left side gets the smaller
    /// half of the padding.
    SameHalf,
}

/// Which statistics a batch-norm node normalises with.
#[derive(Clone, Copy, Debug)]
pub enum BnStatistics<'a> {
    /// Per-channel statistics of the current batch (over batch and time).
    Batch,
    /// Frozen running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Conv1d {
        input: NodeId,
        weight: NodeId,
        geom: ConvGeom,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: Option<(Vec<f64>, Vec<f64>)>,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    MinConst(NodeId, f64),
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Softmax(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L2Normalize {
        input: NodeId,
        norms: Vec<f64>,
    },
    RowCosine {
        a: NodeId,
        b: NodeId,
        na: Vec<f64>,
        nb: Vec<f64>,
    },
    GatherRows {
        input: NodeId,
        indices: Vec<usize>,
    },
    FrameScores {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    WeightedTimeSum {
        input: NodeId,
        weights: NodeId,
    },
    GradReverse(NodeId, f64),
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    t_in: usize,
    t_out: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
}

impl ConvGeom {
    /// Output positions `t` whose tap `k` lands inside the input.
    fn valid_range(&self, k: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad_left as isize;
        let lo = if off < 0 { ((-off) + s - 1) / s } else { 0 };
        let last = self.t_in as isize - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(self.t_out as isize) };
        (lo as usize, hi.max(lo) as usize)
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&[f64]> {
        self.grads.get(node.0).and_then(|g| g.as_deref())
    }
}

/// Graph leaves for every parameter of one store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.index()]
    }

    /// Add `scale * dLoss/dParam` to each parameter's gradient slot.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParameterStore, scale: f64) {
        if scale == 0.0 {
            return;
        }
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(g) = grads.get(self.node(id)) {
                if scale == 1.0 {
                    store.accumulate_grad(id, g);
                } else {
                    let scaled: Vec<f64> = g.iter().map(|v| scale * v).collect();
                    store.accumulate_grad(id, &scaled);
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    let d = *t.shape().last().unwrap_or(&1);
    (t.len() / d, d)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Param)
    }

    /// Create a leaf for every parameter in `store`.
    pub fn bind(&mut self, store: &ParameterStore) -> Binding {
        let nodes = store.ids().map(|id| self.param(store, id)).collect();
        Binding { nodes }
    }

    /// Batch statistics (mean, biased variance) computed by a train-mode
    /// batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { batch: Some((m, v)), .. } => Some((m, v)),
            _ => None,
        }
    }

    /// 1-D convolution of `[B, C_in, T]` (or `[C_in, T]`) with `[C_out, C_in, K]`.
    pub fn conv1d(&mut self, input: NodeId, weight: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let (batch, c_in, t_in, squeeze) = match x.shape() {
            [c, t] => (1, *c, *t, true),
            [b, c, t] => (*b, *c, *t, false),
            s => return Err(Error::shape("conv1d", format!("input must be [C,T] or [B,C,T], got {s:?}"))),
        };
        let [c_out, wc_in, kernel] = *w.shape() else {
            return Err(Error::shape("conv1d", format!("weight must be [C_out,C_in,K], got {:?}", w.shape())));
        };
        if wc_in != c_in {
            return Err(Error::shape("conv1d", format!("input has {c_in} channels, weight expects {wc_in}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be >= 1".into()));
        }
        let (t_out, pad_left) = match padding {
            Padding::Valid => {
                if t_in < kernel {
                    return Err(Error::InputTooShort { op: "conv1d", len: t_in, span: kernel });
                }
                ((t_in - kernel) / stride + 1, 0)
            }
            Padding::SameHalf => {
                let t_out = t_in.div_ceil(stride);
                let need = (t_out - 1) * stride + kernel;
                (t_out, need.saturating_sub(t_in) / 2)
            }
        };
        let geom = ConvGeom { batch, c_in, c_out, t_in, t_out, kernel, stride, pad_left };
        let xd = x.data();
        let wd = w.data();
        let mut out = vec![0.0; batch * c_out * t_out];
        for b in 0..batch {
            for o in 0..c_out {
                let orow = &mut out[(b * c_out + o) * t_out..][..t_out];
                for i in 0..c_in {
                    let xrow = &xd[(b * c_in + i) * t_in..][..t_in];
                    for k in 0..kernel {
                        let wv = wd[(o * c_in + i) * kernel + k];
                        let (lo, hi) = geom.valid_range(k);
                        let base = k as isize - pad_left as isize;
                        if stride == 1 {
                            let start = (lo as isize + base) as usize;
                            for (ov, xv) in orow[lo..hi].iter_mut().zip(&xrow[start..]) {
                                *ov += wv * xv;
                            }
                        } else {
                            for (t, ov) in orow.iter_mut().enumerate().take(hi).skip(lo) {
                                *ov += wv * xrow[(t as isize * stride as isize + base) as usize];
                            }
                        }
                    }
                }
            }
        }
        let shape = if squeeze { vec![c_out, t_out] } else { vec![batch, c_out, t_out] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Conv1d { input, weight, geom }))
    }

    /// Per-channel batch normalisation of `[B, C, T]` (or `[C, T]`).
    pub fn batch_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, stats: BnStatistics<'_>) -> Result<NodeId> {
        let x = self.value(input);
        let (batch, ch, t) = match x.shape() {
            [c, t] => (1, *c, *t),
            [b, c, t] => (*b, *c, *t),
            s => return Err(Error::shape("batch_norm", format!("input must be [C,T] or [B,C,T], got {s:?}"))),
        };
        if self.value(gamma).len() != ch || self.value(beta).len() != ch {
            return Err(Error::shape("batch_norm", format!("gamma/beta must have {ch} entries")));
        }
        let xd = x.data();
        let n = (batch * t) as f64;
        let (mean, var, batch_stats) = match stats {
            BnStatistics::Batch => {
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for c in 0..ch {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += xd[(b * ch + c) * t..][..t].iter().sum::<f64>();
                    }
                    let m = s / n;
                    let mut v = 0.0;
                    for b in 0..batch {
                        v += xd[(b * ch + c) * t..][..t].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = v / n;
                }
                (mean.clone(), var.clone(), Some((mean, var)))
            }
            BnStatistics::Running { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(Error::shape("batch_norm", "running statistics have wrong length"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * t;
                for j in off..off + t {
                    let h = (xd[j] - mean[c]) * inv_std[c];
                    xhat[j] = h;
                    out[j] = g[c] * h + bt[c];
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch: batch_stats }))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let out: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Relu(input))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        Ok(x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary(a, b, "add", |p, q| p + q)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary(a, b, "sub", |p, q| p - q)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary(a, b, "mul", |p, q| p * q)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let x = self.value(input);
        let out = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Scale(input, factor))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(input))
    }

    /// Elementwise `min(x, bound)`. The derivative flows to `x` wherever
    /// `x <= bound` (ties go to the first argument).
    pub fn min_const(&mut self, input: NodeId, bound: f64) -> NodeId {
        let x = self.value(input);
        let out = x.data().iter().map(|v| v.min(bound)).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::MinConst(input, bound))
    }

    /// `x W^T + b` for `x: [B, In]` (or `[In]`), `W: [Out, In]`, `b: [Out]`.
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let bvec = self.value(bias);
        let (rows, d_in, squeeze) = match x.shape() {
            [d] => (1, *d, true),
            [r, d] => (*r, *d, false),
            s => return Err(Error::shape("affine", format!("input must be [In] or [B,In], got {s:?}"))),
        };
        let [d_out, wd_in] = *w.shape() else {
            return Err(Error::shape("affine", format!("weight must be [Out,In], got {:?}", w.shape())));
        };
        if wd_in != d_in || bvec.len() != d_out {
            return Err(Error::shape(
                "affine",
                format!("input dim {d_in}, weight {:?}, bias {:?}", w.shape(), bvec.shape()),
            ));
        }
        let (xd, wdat, bd) = (x.data(), w.data(), bvec.data());
        let mut out = vec![0.0; rows * d_out];
        for r in 0..rows {
            let xr = &xd[r * d_in..][..d_in];
            for o in 0..d_out {
                out[r * d_out + o] = bd[o] + crate::tensor::dot(xr, &wdat[o * d_in..][..d_in]);
            }
        }
        let shape = if squeeze { vec![d_out] } else { vec![rows, d_out] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Affine { input, weight, bias }))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let (rows, d) = rows_of(x);
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            softmax_into(&x.data()[r * d..][..d], &mut out[r * d..][..d]);
        }
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax(input))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let x = self.value(logits);
        let (rows, d) = rows_of(x);
        if labels.len() != rows {
            return Err(Error::shape("softmax_cross_entropy", format!("{rows} rows, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= d) {
            return Err(Error::Contract(format!("label {bad} out of range for {d} classes")));
        }
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &x.data()[r * d..][..d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_into(row, &mut probs[r * d..][..d]);
        }
        let value = Tensor::scalar(loss / rows as f64);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Scale each row (last axis) to unit L2 norm.
    pub fn l2_normalize(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (rows, d) = rows_of(x);
        let mut out = vec![0.0; x.len()];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * d..][..d];
            let n = crate::tensor::norm(row);
            if n <= EPS_NORM || !n.is_finite() {
                return Err(Error::DegenerateEmbedding(format!("row {r} has norm {n:e}")));
            }
            for (o, v) in out[r * d..][..d].iter_mut().zip(row) {
                *o = v / n;
            }
            norms.push(n);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::L2Normalize { input, norms }))
    }

    /// Cosine similarity of matching rows; drops the last axis.
    pub fn row_cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("row_cosine", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let (rows, d) = rows_of(x);
        let mut out = Vec::with_capacity(rows);
        let mut na = Vec::with_capacity(rows);
        let mut nb = Vec::with_capacity(rows);
        for r in 0..rows {
            let (xr, yr) = (&x.data()[r * d..][..d], &y.data()[r * d..][..d]);
            let (p, q) = (crate::tensor::norm(xr), crate::tensor::norm(yr));
            if p <= EPS_NORM || q <= EPS_NORM {
                return Err(Error::DegenerateEmbedding(format!("cosine of a zero-norm row ({r})")));
            }
            out.push(crate::tensor::dot(xr, yr) / (p * q));
            na.push(p);
            nb.push(q);
        }
        let shape = x.shape()[..x.rank().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::RowCosine { a, b, na, nb }))
    }

    /// Select rows of a `[R, D]` node.
    pub fn gather_rows(&mut self, input: NodeId, indices: &[usize]) -> Result<NodeId> {
        let x = self.value(input);
        let [rows, d] = *x.shape() else {
            return Err(Error::shape("gather_rows", format!("input must be [R,D], got {:?}", x.shape())));
        };
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape("gather_rows", format!("row {i} of {rows}")));
            }
            out.extend_from_slice(&x.data()[i * d..][..d]);
        }
        let value = Tensor::new(vec![indices.len(), d], out)?;
        Ok(self.push(value, Op::GatherRows { input, indices: indices.to_vec() }))
    }

    /// One scalar score per frame: `s[b, t] = sum_c w[c] h[b, c, t] + bias`.
    pub fn frame_scores(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let h = self.value(input);
        let [batch, ch, t] = *h.shape() else {
            return Err(Error::shape("frame_scores", format!("input must be [B,C,T], got {:?}", h.shape())));
        };
        let w = self.value(weight).data();
        if w.len() != ch || self.value(bias).len() != 1 {
            return Err(Error::shape("frame_scores", format!("weight must have {ch} entries and bias 1")));
        }
        let b0 = self.value(bias).data()[0];
        let mut out = vec![b0; batch * t];
        for b in 0..batch {
            let orow = &mut out[b * t..][..t];
            for c in 0..ch {
                let hrow = &h.data()[(b * ch + c) * t..][..t];
                for (o, v) in orow.iter_mut().zip(hrow) {
                    *o += w[c] * v;
                }
            }
        }
        let value = Tensor::new(vec![batch, t], out)?;
        Ok(self.push(value, Op::FrameScores { input, weight, bias }))
    }

    /// `out[b, c] = sum_t weights[b, t] * h[b, c, t]`.
    pub fn weighted_time_sum(&mut self, input: NodeId, weights: NodeId) -> Result<NodeId> {
        let h = self.value(input);
        let a = self.value(weights);
        let [batch, ch, t] = *h.shape() else {
            return Err(Error::shape("weighted_time_sum", format!("input must be [B,C,T], got {:?}", h.shape())));
        };
        if a.shape() != [batch, t] {
            return Err(Error::shape("weighted_time_sum", format!("weights {:?} vs [{batch}, {t}]", a.shape())));
        }
        let mut out = vec![0.0; batch * ch];
        for b in 0..batch {
            let arow = &a.data()[b * t..][..t];
            for c in 0..ch {
                out[b * ch + c] = crate::tensor::dot(arow, &h.data()[(b * ch + c) * t..][..t]);
            }
        }
        let value = Tensor::new(vec![batch, ch], out)?;
        Ok(self.push(value, Op::WeightedTimeSum { input, weights }))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `-factor` on the way back.
    pub fn grad_reverse(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = self.value(input).clone();
        self.push(value, Op::GradReverse(input, factor))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> &'a mut [f64] {
        let len = self.value(id).len();
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv1d { input, weight, geom } => {
                let xd = self.value(*input).data();
                let wd = self.value(*weight).data();
                let ConvGeom { batch, c_in, c_out, t_in, t_out, kernel, stride, pad_left } = *geom;
                let mut dw = vec![0.0; wd.len()];
                let mut dx = vec![0.0; xd.len()];
                for b in 0..batch {
                    for o in 0..c_out {
                        let grow = &g[(b * c_out + o) * t_out..][..t_out];
                        for ci in 0..c_in {
                            let xoff = (b * c_in + ci) * t_in;
                            for k in 0..kernel {
                                let widx = (o * c_in + ci) * kernel + k;
                                let wv = wd[widx];
                                let (lo, hi) = geom.valid_range(k);
                                let base = k as isize - pad_left as isize;
                                let mut acc = 0.0;
                                for (t, gv) in grow.iter().enumerate().take(hi).skip(lo) {
                                    let j = xoff + (t as isize * stride as isize + base) as usize;
                                    acc += gv * xd[j];
                                    dx[j] += wv * gv;
                                }
                                dw[widx] += acc;
                            }
                        }
                    }
                }
                add_into(self.slot(grads, *input), &dx);
                add_into(self.slot(grads, *weight), &dw);
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch } => {
                let shape = self.value(*input).shape();
                let (nb, ch, t) = match shape {
                    [c, t] => (1, *c, *t),
                    [b, c, t] => (*b, *c, *t),
                    _ => unreachable!(),
                };
                let gm = self.value(*gamma).data();
                let n = (nb * t) as f64;
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                let mut dx = vec![0.0; g.len()];
                for c in 0..ch {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for b in 0..nb {
                        let off = (b * ch + c) * t;
                        for j in off..off + t {
                            dbeta[c] += g[j];
                            dgamma[c] += g[j] * xhat[j];
                            s1 += g[j] * gm[c];
                            s2 += g[j] * gm[c] * xhat[j];
                        }
                    }
                    for b in 0..nb {
                        let off = (b * ch + c) * t;
                        for j in off..off + t {
                            let dxh = g[j] * gm[c];
                            dx[j] = if batch.is_some() {
                                inv_std[c] / n * (n * dxh - s1 - xhat[j] * s2)
                            } else {
                                dxh * inv_std[c]
                            };
                        }
                    }
                }
                add_into(self.slot(grads, *input), &dx);
                add_into(self.slot(grads, *gamma), &dgamma);
                add_into(self.slot(grads, *beta), &dbeta);
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let s = self.slot(grads, *input);
                for ((d, gv), xv) in s.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.slot(grads, *a), g);
                add_into(self.slot(grads, *b), g);
            }
            Op::Sub(a, b) => {
                add_into(self.slot(grads, *a), g);
                for (d, gv) in self.slot(grads, *b).iter_mut().zip(g) {
                    *d -= gv;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                add_into(self.slot(grads, *a), &da);
                add_into(self.slot(grads, *b), &db);
            }
            Op::Scale(input, f) => {
                for (d, gv) in self.slot(grads, *input).iter_mut().zip(g) {
                    *d += f * gv;
                }
            }
            Op::GradReverse(input, f) => {
                // A zero factor cuts the path entirely, so gamma = 0 leaves
                // upstream gradients bit-identical to a graph without the head.
                if *f == 0.0 {
                    return;
                }
                for (d, gv) in self.slot(grads, *input).iter_mut().zip(g) {
                    *d += -f * gv;
                }
            }
            Op::Sum(input) => {
                for d in self.slot(grads, *input).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(input) => {
                let n = self.value(*input).len() as f64;
                for d in self.slot(grads, *input).iter_mut() {
                    *d += g[0] / n;
                }
            }
            Op::MinConst(input, bound) => {
                let x = self.value(*input).data();
                for ((d, gv), xv) in self.slot(grads, *input).iter_mut().zip(g).zip(x) {
                    if *xv <= *bound {
                        *d += gv;
                    }
                }
            }
            Op::Affine { input, weight, bias } => {
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let [d_out, d_in] = *self.value(*weight).shape() else { unreachable!() };
                let rows = x.len() / d_in;
                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; d_out];
                for r in 0..rows {
                    let xr = &x[r * d_in..][..d_in];
                    for o in 0..d_out {
                        let gv = g[r * d_out + o];
                        db[o] += gv;
                        let wr = &w[o * d_in..][..d_in];
                        for j in 0..d_in {
                            dx[r * d_in + j] += gv * wr[j];
                            dw[o * d_in + j] += gv * xr[j];
                        }
                    }
                }
                add_into(self.slot(grads, *input), &dx);
                add_into(self.slot(grads, *weight), &dw);
                add_into(self.slot(grads, *bias), &db);
            }
            Op::Softmax(input) => {
                let y = node.value.data();
                let (rows, d) = rows_of(&node.value);
                let s = self.slot(grads, *input);
                for r in 0..rows {
                    let (yr, gr) = (&y[r * d..][..d], &g[r * d..][..d]);
                    let inner = crate::tensor::dot(yr, gr);
                    for j in 0..d {
                        s[r * d + j] += yr[j] * (gr[j] - inner);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let rows = labels.len();
                let d = probs.len() / rows;
                let scale = g[0] / rows as f64;
                let s = self.slot(grads, *logits);
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..d {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        s[r * d + j] += scale * (probs[r * d + j] - onehot);
                    }
                }
            }
            Op::L2Normalize { input, norms } => {
                let y = node.value.data();
                let d = y.len() / norms.len();
                let s = self.slot(grads, *input);
                for (r, n) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..][..d], &g[r * d..][..d]);
                    let inner = crate::tensor::dot(yr, gr);
                    for j in 0..d {
                        s[r * d + j] += (gr[j] - yr[j] * inner) / n;
                    }
                }
            }
            Op::RowCosine { a, b, na, nb } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let c = node.value.data();
                let d = x.len() / na.len();
                let mut da = vec![0.0; x.len()];
                let mut db = vec![0.0; y.len()];
                for r in 0..na.len() {
                    let (p, q) = (na[r], nb[r]);
                    for j in 0..d {
                        let (xv, yv) = (x[r * d + j], y[r * d + j]);
                        da[r * d + j] = g[r] * (yv / (p * q) - c[r] * xv / (p * p));
                        db[r * d + j] = g[r] * (xv / (p * q) - c[r] * yv / (q * q));
                    }
                }
                add_into(self.slot(grads, *a), &da);
                add_into(self.slot(grads, *b), &db);
            }
            Op::GatherRows { input, indices } => {
                let d = node.value.dim(1);
                let s = self.slot(grads, *input);
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        s[i * d + j] += g[k * d + j];
                    }
                }
            }
            Op::FrameScores { input, weight, bias } => {
                let h = self.value(*input);
                let [batch, ch, t] = *h.shape() else { unreachable!() };
                let w = self.value(*weight).data();
                let mut dh = vec![0.0; h.len()];
                let mut dw = vec![0.0; ch];
                for b in 0..batch {
                    let grow = &g[b * t..][..t];
                    for c in 0..ch {
                        let off = (b * ch + c) * t;
                        dw[c] += crate::tensor::dot(grow, &h.data()[off..][..t]);
                        for (dv, gv) in dh[off..][..t].iter_mut().zip(grow) {
                            *dv = w[c] * gv;
                        }
                    }
                }
                add_into(self.slot(grads, *input), &dh);
                add_into(self.slot(grads, *weight), &dw);
                let db: f64 = g.iter().sum();
                self.slot(grads, *bias)[0] += db;
            }
            Op::WeightedTimeSum { input, weights } => {
                let h = self.value(*input);
                let a = self.value(*weights).data();
                let [batch, ch, t] = *h.shape() else { unreachable!() };
                let mut dh = vec![0.0; h.len()];
                let mut da = vec![0.0; a.len()];
                for b in 0..batch {
                    let arow = &a[b * t..][..t];
                    for c in 0..ch {
                        let gv = g[b * ch + c];
                        let off = (b * ch + c) * t;
                        let hrow = &h.data()[off..][..t];
                        for j in 0..t {
                            dh[off + j] = gv * arow[j];
                            da[b * t + j] += gv * hrow[j];
                        }
                    }
                }
                add_into(self.slot(grads, *input), &dh);
                add_into(self.slot(grads, *weights), &da);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
