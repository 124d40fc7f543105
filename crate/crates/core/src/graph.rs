//! Eager tape for reverse-mode differentiation.
//!
//! Every operation evaluates immediately and appends a node holding its
//! value, its inputs and whatever it needs for the backward rule. Inputs
//! always precede the node that consumes them, so a single reverse sweep
//! over the node list visits each operation once in a valid order.

use crate::attention::{self, AttnCache, AttnGrads, AttnWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable operation the tape records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Linear,
    Gelu,
    LayerNorm,
    Softmax,
    CrossAttention,
    MeanOverFirstAxis,
    WeightedSum,
    ConcatChannels,
    NegEntropy,
    Mse,
    Add,
    Scale,
    Dot,
    Sum,
    Reshape,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::Linear,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::CrossAttention,
        OpKind::MeanOverFirstAxis,
        OpKind::WeightedSum,
        OpKind::ConcatChannels,
        OpKind::NegEntropy,
        OpKind::Mse,
        OpKind::Add,
        OpKind::Scale,
        OpKind::Dot,
        OpKind::Sum,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Linear => "linear",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::CrossAttention => "cross_attention",
            OpKind::MeanOverFirstAxis => "mean_over_first_axis",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::NegEntropy => "neg_entropy",
            OpKind::Mse => "mse",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Dot => "dot",
            OpKind::Sum => "sum",
            OpKind::Reshape => "reshape",
        }
    }
}

/// Projection parameters of one cross-attention module.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    CrossAttention {
        q: Var,
        kv: Var,
        p: AttentionVars,
        heads: usize,
        cache: Box<AttnCache>,
    },
    Mean(Vec<Var>),
    WeightedSum {
        ws: Var,
        xs: Vec<Var>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    NegEntropy {
        w: Var,
        floor: f64,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Dot(Var, Var),
    Sum(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn with_shape_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("rank >= 1") = last;
    s
}

/// Runs `f` against the gradient buffer of `v`, allocating it on first use.
/// Inputs that do not require a gradient are skipped.
fn accumulate(nodes: &mut [Node], v: Var, f: impl FnOnce(&[Node], &mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let mut g = nodes[v.0].grad.take().unwrap_or_else(|| vec![0.0; len]);
    f(nodes, &mut g);
    nodes[v.0].grad = Some(g);
}

fn take_grad(nodes: &mut [Node], v: Var) -> Option<Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(nodes[v.0].grad.take().unwrap_or_else(|| vec![0.0; len]))
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
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

    /// Gradient accumulated by the last [`Graph::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad matches value shape"))
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::dim("linear", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(Error::dim("linear", ws, bs));
        }
        let dout = ws[1];
        let out_shape = with_shape_last(xs, dout);
        let xv = &self.nodes[x.0].value;
        let wv = self.nodes[w.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * dout);
        for r in 0..rows {
            out.extend_from_slice(bv);
            let o = &mut out[r * dout..];
            for (p, &xp) in xv.row(r).iter().enumerate() {
                if xp == 0.0 {
                    continue;
                }
                for (oj, wj) in o.iter_mut().zip(&wv[p * dout..(p + 1) * dout]) {
                    *oj += xp * wj;
                }
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let d = xv.cols();
        if d < 2 {
            return Err(Error::Config(format!(
                "layer_norm needs at least 2 features per row, got {d}"
            )));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::dim("layer_norm", xv.shape(), self.shape(p)));
            }
        }
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + bt[j]);
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over the last axis, stabilized by subtracting each row's max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let d = xv.cols();
        if d == 0 {
            return Err(Error::dim("softmax", xv.shape(), &[1]));
        }
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &v in row {
                let e = (v - max).exp();
                z += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o /= z;
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Multi-head attention of a single query row over the rows of `kv`.
    pub fn cross_attention(
        &mut self,
        q: Var,
        kv: Var,
        p: AttentionVars,
        heads: usize,
    ) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let d = *qs.last().expect("rank >= 1");
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if self.value(q).rows() != 1 {
            return Err(Error::dim("cross_attention", &qs, &[1, d]));
        }
        let kvs = self.shape(kv);
        if kvs.len() != 2 || kvs[1] != d || kvs[0] == 0 {
            return Err(Error::dim("cross_attention", &qs, kvs));
        }
        for (w, b) in [(p.wq, p.bq), (p.wk, p.bk), (p.wv, p.bv), (p.wo, p.bo)] {
            if self.shape(w) != [d, d] {
                return Err(Error::dim("cross_attention", &[d, d], self.shape(w)));
            }
            if self.shape(b) != [d] {
                return Err(Error::dim("cross_attention", &[d], self.shape(b)));
            }
        }
        let weights = self.attn_weights(&p);
        let (out, cache) = attention::forward(
            self.value(q).data(),
            self.value(kv).data(),
            d,
            heads,
            &weights,
        );
        let value = Tensor::new(&qs, out)?;
        let inputs = [q, kv, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo];
        Ok(self.push(
            value,
            Op::CrossAttention {
                q,
                kv,
                p,
                heads,
                cache: Box::new(cache),
            },
            &inputs,
        ))
    }

    fn attn_weights(&self, p: &AttentionVars) -> AttnWeights<'_> {
        AttnWeights {
            wq: self.value(p.wq).data(),
            bq: self.value(p.bq).data(),
            wk: self.value(p.wk).data(),
            bk: self.value(p.bk).data(),
            wv: self.value(p.wv).data(),
            bv: self.value(p.bv).data(),
            wo: self.value(p.wo).data(),
            bo: self.value(p.bo).data(),
        }
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean_over_first_axis(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptyGroup("mean_over_first_axis"))?;
        let shape = self.shape(first).to_vec();
        let mut acc = vec![0.0; self.value(first).len()];
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::dim("mean_over_first_axis", &shape, self.shape(x)));
            }
            for (a, v) in acc.iter_mut().zip(self.value(x).data()) {
                *a += v;
            }
        }
        let n = xs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let value = Tensor::new(&shape, acc)?;
        Ok(self.push(value, Op::Mean(xs.to_vec()), xs))
    }

    /// `sum_i ws[i] * xs[i]`.
    pub fn weighted_sum(&mut self, ws: Var, xs: &[Var]) -> Result<Var> {
        let wshape = self.shape(ws);
        if wshape.len() != 1 || wshape[0] != xs.len() {
            return Err(Error::dim("weighted_sum", wshape, &[xs.len()]));
        }
        let first = *xs.first().ok_or(Error::EmptyGroup("weighted_sum"))?;
        let shape = self.shape(first).to_vec();
        let mut acc = vec![0.0; self.value(first).len()];
        for (&x, &w) in xs.iter().zip(self.value(ws).data()) {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::dim("weighted_sum", &shape, self.shape(x)));
            }
            for (a, v) in acc.iter_mut().zip(self.value(x).data()) {
                *a += w * v;
            }
        }
        let value = Tensor::new(&shape, acc)?;
        let mut inputs = vec![ws];
        inputs.extend_from_slice(xs);
        Ok(self.push(
            value,
            Op::WeightedSum {
                ws,
                xs: xs.to_vec(),
            },
            &inputs,
        ))
    }

    /// Row-wise concatenation, columns of `a` first. Rank-1 inputs are
    /// treated as a single row.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != bv.rank() || av.rank() > 2 || av.rows() != bv.rows() {
            return Err(Error::dim("concat_channels", av.shape(), bv.shape()));
        }
        let (d1, d2) = (av.cols(), bv.cols());
        let rows = av.rows();
        let mut out = Vec::with_capacity(rows * (d1 + d2));
        for r in 0..rows {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let shape = with_shape_last(av.shape(), d1 + d2);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    /// `sum_k w_k ln w_k` with `0 ln 0 = 0`.
    pub fn neg_entropy(&mut self, w: Var) -> Result<Var> {
        self.neg_entropy_clamped(w, 0.0)
    }

    /// `sum_k w_k ln max(w_k, floor)`. A positive floor keeps the gradient
    /// finite at the corners of the simplex.
    pub fn neg_entropy_clamped(&mut self, w: Var, floor: f64) -> Result<Var> {
        let wv = self.value(w);
        if wv.rank() != 1 {
            return Err(Error::dim("neg_entropy", wv.shape(), &[wv.len()]));
        }
        if let Some((i, v)) = wv.data().iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::Domain {
                op: "neg_entropy",
                detail: format!("component {i} is negative ({v})"),
            });
        }
        let total = wv
            .data()
            .iter()
            .map(|&x| if x == 0.0 { 0.0 } else { x * x.max(floor).ln() })
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::NegEntropy { w, floor }, &[w]))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() || p.is_empty() {
            return Err(Error::dim("mse", p.shape(), t.shape()));
        }
        let n = p.len() as f64;
        let total = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(total), Op::Mse { pred, target }, &[pred, target]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("dot", av.shape(), bv.shape()));
        }
        let total = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(total), Op::Dot(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Sums a list of single-element tensors.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter();
        let mut acc = *it.next().ok_or(Error::EmptyGroup("sum_scalars"))?;
        for &x in it {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    ///
    /// Gradients accumulate across calls; build a fresh graph per evaluation.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::dim("backward", lv.shape(), &[1]));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = node.grad.as_deref() else {
                continue;
            };
            backward_node(before, node, dy);
        }
        Ok(())
    }
}

fn backward_node(nodes: &mut [Node], node: &Node, dy: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let dout = nodes[w.0].value.shape()[1];
            let rows = dy.len() / dout;
            accumulate(nodes, *x, |n, gx| {
                let wv = n[w.0].value.data();
                let din = wv.len() / dout;
                for r in 0..rows {
                    let dyr = &dy[r * dout..(r + 1) * dout];
                    for p in 0..din {
                        gx[r * din + p] += wv[p * dout..(p + 1) * dout]
                            .iter()
                            .zip(dyr)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            });
            accumulate(nodes, *w, |n, gw| {
                let xv = &n[x.0].value;
                for r in 0..rows {
                    let dyr = &dy[r * dout..(r + 1) * dout];
                    for (p, &xp) in xv.row(r).iter().enumerate() {
                        if xp == 0.0 {
                            continue;
                        }
                        for (g, d) in gw[p * dout..(p + 1) * dout].iter_mut().zip(dyr) {
                            *g += xp * d;
                        }
                    }
                }
            });
            accumulate(nodes, *b, |_, gb| {
                for r in 0..rows {
                    for (g, d) in gb.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
                        *g += d;
                    }
                }
            });
        }
        Op::Gelu(x) => accumulate(nodes, *x, |n, gx| {
            for ((g, &xv), d) in gx.iter_mut().zip(n[x.0].value.data()).zip(dy) {
                *g += d * gelu_grad(xv);
            }
        }),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = node.value.cols();
            let rows = node.value.rows();
            accumulate(nodes, *x, |n, gx| {
                let g = n[gamma.0].value.data();
                let mut gh = vec![0.0; d];
                for r in 0..rows {
                    let h = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        gh[j] = dy[r * d + j] * g[j];
                    }
                    let mean_gh = gh.iter().sum::<f64>() / d as f64;
                    let mean_ghh = gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] += inv_std[r] * (gh[j] - mean_gh - h[j] * mean_ghh);
                    }
                }
            });
            accumulate(nodes, *gamma, |_, gg| {
                for (i, (d_, h)) in dy.iter().zip(xhat).enumerate() {
                    gg[i % d] += d_ * h;
                }
            });
            accumulate(nodes, *beta, |_, gb| {
                for (i, d_) in dy.iter().enumerate() {
                    gb[i % d] += d_;
                }
            });
        }
        Op::Softmax(x) => accumulate(nodes, *x, |_, gx| {
            let d = node.value.cols();
            for r in 0..node.value.rows() {
                let y = node.value.row(r);
                let dyr = &dy[r * d..(r + 1) * d];
                let mix: f64 = y.iter().zip(dyr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    gx[r * d + j] += y[j] * (dyr[j] - mix);
                }
            }
        }),
        Op::CrossAttention {
            q,
            kv,
            p,
            heads,
            cache,
        } => {
            let slots = [*q, *kv, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo];
            let mut taken: Vec<Option<Vec<f64>>> =
                slots.iter().map(|&v| take_grad(nodes, v)).collect();
            {
                let [gq, gkv, gwq, gbq, gwk, gbk, gwv, gbv, gwo, gbo] = &mut taken[..] else {
                    unreachable!()
                };
                let w = AttnWeights {
                    wq: nodes[p.wq.0].value.data(),
                    bq: nodes[p.bq.0].value.data(),
                    wk: nodes[p.wk.0].value.data(),
                    bk: nodes[p.bk.0].value.data(),
                    wv: nodes[p.wv.0].value.data(),
                    bv: nodes[p.bv.0].value.data(),
                    wo: nodes[p.wo.0].value.data(),
                    bo: nodes[p.bo.0].value.data(),
                };
                let grads = AttnGrads {
                    q: gq.as_deref_mut(),
                    kv: gkv.as_deref_mut(),
                    wq: gwq.as_deref_mut(),
                    bq: gbq.as_deref_mut(),
                    wk: gwk.as_deref_mut(),
                    bk: gbk.as_deref_mut(),
                    wv: gwv.as_deref_mut(),
                    bv: gbv.as_deref_mut(),
                    wo: gwo.as_deref_mut(),
                    bo: gbo.as_deref_mut(),
                };
                attention::backward(
                    dy,
                    nodes[q.0].value.data(),
                    nodes[kv.0].value.data(),
                    node.value.cols(),
                    *heads,
                    &w,
                    cache,
                    grads,
                );
            }
            // The same var may occupy several slots; restore by summing.
            for (&v, g) in slots.iter().zip(taken) {
                if let Some(g) = g {
                    match nodes[v.0].grad.as_mut() {
                        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => nodes[v.0].grad = Some(g),
                    }
                }
            }
        }
        Op::Mean(xs) => {
            let inv = 1.0 / xs.len() as f64;
            for &x in xs {
                accumulate(nodes, x, |_, gx| {
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += d * inv;
                    }
                });
            }
        }
        Op::WeightedSum { ws, xs } => {
            accumulate(nodes, *ws, |n, gw| {
                for (g, x) in gw.iter_mut().zip(xs) {
                    *g += n[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
            });
            for (k, &x) in xs.iter().enumerate() {
                accumulate(nodes, x, |n, gx| {
                    let wk = n[ws.0].value.data()[k];
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += wk * d;
                    }
                });
            }
        }
        Op::Concat { a, b } => {
            let d1 = nodes[a.0].value.cols();
            let d = node.value.cols();
            let rows = node.value.rows();
            accumulate(nodes, *a, |_, ga| {
                for r in 0..rows {
                    for (g, v) in ga[r * d1..(r + 1) * d1].iter_mut().zip(&dy[r * d..r * d + d1]) {
                        *g += v;
                    }
                }
            });
            let d2 = d - d1;
            accumulate(nodes, *b, |_, gb| {
                for r in 0..rows {
                    for (g, v) in gb[r * d2..(r + 1) * d2]
                        .iter_mut()
                        .zip(&dy[r * d + d1..(r + 1) * d])
                    {
                        *g += v;
                    }
                }
            });
        }
        Op::NegEntropy { w, floor } => accumulate(nodes, *w, |n, gw| {
            let floor = floor.max(f64::MIN_POSITIVE);
            for (g, &x) in gw.iter_mut().zip(n[w.0].value.data()) {
                let local = if x >= floor { x.ln() + 1.0 } else { floor.ln() };
                *g += dy[0] * local;
            }
        }),
        Op::Mse { pred, target } => {
            let n_el = node_len(nodes, *pred) as f64;
            let diff: Vec<f64> = nodes[pred.0]
                .value
                .data()
                .iter()
                .zip(nodes[target.0].value.data())
                .map(|(a, b)| 2.0 * (a - b) / n_el * dy[0])
                .collect();
            accumulate(nodes, *pred, |_, g| {
                g.iter_mut().zip(&diff).for_each(|(a, b)| *a += b)
            });
            accumulate(nodes, *target, |_, g| {
                g.iter_mut().zip(&diff).for_each(|(a, b)| *a -= b)
            });
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                accumulate(nodes, v, |_, g| g.iter_mut().zip(dy).for_each(|(x, d)| *x += d));
            }
        }
        Op::Scale(x, c) => accumulate(nodes, *x, |_, g| {
            g.iter_mut().zip(dy).for_each(|(v, d)| *v += c * d)
        }),
        Op::Dot(a, b) => {
            accumulate(nodes, *a, |n, g| {
                g.iter_mut()
                    .zip(n[b.0].value.data())
                    .for_each(|(v, o)| *v += dy[0] * o)
            });
            accumulate(nodes, *b, |n, g| {
                g.iter_mut()
                    .zip(n[a.0].value.data())
                    .for_each(|(v, o)| *v += dy[0] * o)
            });
        }
        Op::Sum(x) => accumulate(nodes, *x, |_, g| g.iter_mut().for_each(|v| *v += dy[0])),
        Op::Reshape(x) => accumulate(nodes, *x, |_, g| {
            g.iter_mut().zip(dy).for_each(|(v, d)| *v += d)
        }),
    }
}

fn node_len(nodes: &[Node], v: Var) -> usize {
    nodes[v.0].value.len()
}
