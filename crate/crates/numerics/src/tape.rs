//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends a node holding its forward value. Because inputs
//! must already exist on the tape when an op is recorded, node order is a
//! topological order and `backward` is a single reverse sweep.

use std::cell::Cell;

use crate::error::{NumericsError, Result};
use crate::tensor::{
    self, axis_split, gelu, gelu_grad, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor,
    LAYER_NORM_EPS, ZERO_NORM,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, m: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MeanAxis { a: Var, outer: usize, n: usize, inner: usize },
    Softmax { a: Var, outer: usize, n: usize, inner: usize },
    CausalSoftmax { a: Var },
    LayerNorm { x: Var, gain: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Cosine { a: Var, b: Var, degenerate: bool },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Counters for numerically degenerate events seen while recording.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Cosine similarities evaluated with a zero-norm operand (reported as 0).
    pub zero_norm_cosines: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    diagnostics: Diagnostics,
}

thread_local! {
    static CORRUPT_GELU: Cell<bool> = const { Cell::new(false) };
}

/// Mutation-testing hook: while enabled on the current thread, the GELU
/// backward rule is scaled by 1.01 so gradient checks must fail.
pub fn set_corrupt_gelu_backward(enabled: bool) {
    CORRUPT_GELU.with(|c| c.set(enabled));
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

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(false),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a copy of `t`; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        self.push(value, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
        let n = self.value(b).shape()[1];
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
        let n = self.value(b).shape()[0];
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMulNt { a, b, m, k, n }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let (m, n) = (self.value(a).shape()[0], self.value(a).shape()[1]);
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Transpose { a, m, n }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).mean_axis(axis)?;
        let (outer, n, inner) = axis_split(self.value(a).shape(), axis, "mean_axis")?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::MeanAxis { a, outer, n, inner }, ng))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).softmax(axis)?;
        let (outer, n, inner) = axis_split(self.value(a).shape(), axis, "softmax")?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Softmax { a, outer, n, inner }, ng))
    }

    /// Row softmax of an `[r × c]` score matrix where row `i` may only see
    /// columns `j <= i + offset`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var, offset: usize) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(NumericsError::Rank {
                op: "causal_softmax",
                expected: 2,
                shape: x.shape().to_vec(),
            });
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        if r + offset > c {
            return Err(NumericsError::ShapeMismatch {
                op: "causal_softmax",
                left: vec![r, offset],
                right: vec![r, c],
            });
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let visible = i + offset + 1;
            let row = &x.data()[i * c..i * c + visible];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in out[i * c..i * c + visible].iter_mut().zip(row) {
                *o = (v - max).exp();
                z += *o;
            }
            out[i * c..i * c + visible].iter_mut().for_each(|o| *o /= z);
        }
        let value = Tensor::new([r, c], out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::CausalSoftmax { a }, ng))
    }

    /// Bias-free layer normalization over the last axis with per-feature `gain`.
    pub fn layer_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gain);
        let h = *xv.shape().last().ok_or(NumericsError::Empty("layer_norm"))?;
        if gv.len() != h {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let rows = xv.len() / h;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..h {
                let xh = (row[j] - mean) * is;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * gv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(&[x, gain]);
        let (xhat, inv_std) = if ng { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(value, Op::LayerNorm { x, gain, xhat, inv_std }, ng))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(idx)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::GatherRows { a, idx: idx.to_vec() }, ng))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::SliceCols { a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(NumericsError::Empty("concat_cols"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(*first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new([rows, total], out)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Mean cross-entropy of `[n × V]` logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.rows() != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if targets.is_empty() {
            return Err(NumericsError::Empty("cross_entropy"));
        }
        let v = lv.cols();
        let probs = lv.softmax(1)?.into_data();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(NumericsError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            // log-softmax directly for accuracy on confident rows
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        let ng = self.ng(&[logits]);
        let probs = if ng { probs } else { Vec::new() };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Scalar cosine similarity; a zero-norm operand yields 0 with zero
    /// gradient and bumps [`Diagnostics::zero_norm_cosines`].
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cosine_sim",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let c = tensor::cosine(av.data(), bv.data());
        let degenerate = c.is_none();
        if degenerate {
            self.diagnostics.zero_norm_cosines += 1;
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::scalar(c.unwrap_or(0.0)),
            Op::Cosine { a, b, degenerate },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| matmul_nt_acc(g, bv, ga, *m, *n, *k));
                acc(*b, &mut |gb| matmul_tn_acc(av, g, gb, *m, *k, *n));
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| matmul_acc(g, bv, ga, *m, *n, *k));
                acc(*b, &mut |gb| matmul_tn_acc(g, av, gb, *m, *n, *k));
            }
            Op::Transpose { a, m, n } => acc(*a, &mut |ga| {
                for i in 0..*m {
                    for j in 0..*n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }),
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g, 1.0));
                acc(*b, &mut |gb| add_into(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g, 1.0));
                acc(*b, &mut |gb| add_into(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(o, (gi, bi))| *o += gi * bi)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g.iter().zip(av)).for_each(|(o, (gi, ai))| *o += gi * ai)
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| add_into(ga, g, *c)),
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::MeanAxis { a, outer, n, inner } => acc(*a, &mut |ga| {
                let inv = 1.0 / *n as f64;
                for o in 0..*outer {
                    for i in 0..*n {
                        for r in 0..*inner {
                            ga[(o * n + i) * inner + r] += g[o * inner + r] * inv;
                        }
                    }
                }
            }),
            Op::Softmax { a, outer, n, inner } => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for o in 0..*outer {
                        for r in 0..*inner {
                            let idx = |i: usize| (o * n + i) * inner + r;
                            let s: f64 = (0..*n).map(|i| y[idx(i)] * g[idx(i)]).sum();
                            for i in 0..*n {
                                ga[idx(i)] += y[idx(i)] * (g[idx(i)] - s);
                            }
                        }
                    }
                });
            }
            Op::CausalSoftmax { a } => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                let r = node.value.shape()[0];
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let s = tensor::dot(yr, gr);
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, xhat, inv_std } => {
                let gv = nodes[gain.0].value.data();
                let h = gv.len();
                let rows = inv_std.len();
                acc(*gain, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..h {
                            gg[j] += g[r * h + j] * xhat[r * h + j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; h];
                    for r in 0..rows {
                        let xh = &xhat[r * h..(r + 1) * h];
                        for j in 0..h {
                            dxhat[j] = g[r * h + j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / h as f64;
                        let m2 = tensor::dot(&dxhat, xh) / h as f64;
                        for j in 0..h {
                            gx[r * h + j] += inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = nodes[a.0].value.data();
                let fudge = if CORRUPT_GELU.with(Cell::get) { 1.01 } else { 1.0 };
                acc(*a, &mut |ga| {
                    for ((o, gi), xi) in ga.iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_grad(*xi) * fudge;
                    }
                });
            }
            Op::GatherRows { a, idx } => {
                let n = nodes[a.0].value.cols();
                acc(*a, &mut |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[i * n..(i + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |gp| add_into(gp, &g[off..off + len], 1.0));
                    off += len;
                }
            }
            Op::SliceCols { a, start } => {
                let n = nodes[a.0].value.cols();
                let (rows, len) = (node.value.rows(), node.value.cols());
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        add_into(
                            &mut ga[r * n + start..r * n + start + len],
                            &g[r * len..(r + 1) * len],
                            1.0,
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &mut |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                                1.0,
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = nodes[logits.0].value.cols();
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                });
            }
            Op::Cosine { a, b, degenerate } => {
                if *degenerate {
                    return;
                }
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let (na, nb) = (tensor::norm(av), tensor::norm(bv));
                let c = tensor::dot(av, bv) / (na * nb);
                debug_assert!(na >= ZERO_NORM && nb >= ZERO_NORM);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[0] * (bv[i] / (na * nb) - c * av[i] / (na * na));
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[0] * (av[i] / (na * nb) - c * bv[i] / (nb * nb));
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    if c == 1.0 {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
    } else {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += c * s);
    }
}

/// Result of [`Tape::backward`]: one optional gradient buffer per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad`; a missing gradient counts as zero.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.len()]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)
    }

    #[test]
    fn sum_grad_is_ones_and_accumulates() {
        let mut x = param(&[3], vec![1.0, -2.0, 0.5]);
        for round in 1..=2 {
            let mut tape = Tape::new();
            let v = tape.leaf(&x);
            let s = tape.sum(v);
            let g = tape.backward(s).unwrap();
            g.accumulate_into(v, &mut x).unwrap();
            assert_eq!(x.grad().unwrap(), &vec![round as f64; 3][..]);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(&param(&[2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(NumericsError::NotScalar(_))));
    }

    #[test]
    fn cosine_gradient_orthogonal_at_self() {
        let x0 = vec![0.3, -1.2, 2.0, 0.7];
        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[4], x0.clone()));
        let c = tape.constant(Tensor::vector(x0.clone()));
        let cs = tape.cosine_sim(x, c).unwrap();
        assert!((tape.scalar(cs) - 1.0).abs() < 1e-15);
        let g = tape.backward(cs).unwrap();
        let gx = g.get(x).unwrap();
        assert!(tensor::dot(gx, &x0).abs() < 1e-10);
    }

    #[test]
    fn zero_norm_cosine_counted_and_gradient_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(&[2], vec![0.0, 0.0]));
        let y = tape.leaf(&param(&[2], vec![1.0, 0.0]));
        let c = tape.cosine_sim(x, y).unwrap();
        assert_eq!(tape.scalar(c), 0.0);
        assert_eq!(tape.diagnostics().zero_norm_cosines, 1);
        let g = tape.backward(c).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(&param(&[2], vec![3.0, 4.0]));
        let m = tape.mul(a, b).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new([2, 3], vec![1.0, 5.0, 9.0, 1.0, 2.0, 9.0]).unwrap());
        let p = tape.causal_softmax(s, 1).unwrap();
        let v = tape.value(p).data();
        assert_eq!(v[2], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
        assert!((v[3] + v[4] + v[5] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros([2, 4]));
        let ce = tape.cross_entropy(l, &[0, 3]).unwrap();
        assert!((tape.scalar(ce) - 4f64.ln()).abs() < 1e-15);
        assert!(tape.cross_entropy(l, &[0, 4]).is_err());
    }
}
