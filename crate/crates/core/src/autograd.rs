//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and applies each op's exact
//! vector-Jacobian product. Gradients are only propagated into nodes that
//! depend on a leaf created with `requires_grad`, so frozen weights cost no
//! backward work. A graph is single-threaded; independent graphs may run on
//! separate threads.

use crate::error::{Error, Result};
use crate::ops::{self, LayerNormCache};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward corruption, used as a negative control for the
/// gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scale the kernel gradient of every convolution by 1.5.
    ConvKernelGrad,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Gelu(Var),
    Relu(Var),
    Conv2d(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    CosineRows {
        query: Var,
        keys: Var,
        norms: Vec<f64>,
        query_norm: f64,
    },
    WeightedSum {
        weights: Var,
        parts: Vec<Var>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L1Distance {
        x: Var,
        target: Tensor,
    },
    Inner {
        x: Var,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
    zero_norm_events: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<BackwardFault>) -> Self {
        Self {
            fault,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of cosine evaluations that hit a zero-norm input so far.
    pub fn zero_norm_events(&self) -> usize {
        self.zero_norm_events
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value.detached(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "add of shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, cols) = tx.matrix_dims()?;
        if tb.len() != cols {
            return Err(Error::dim(format!(
                "bias of {} entries for {cols} columns",
                tb.len()
            )));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % cols])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, cols) = tx.matrix_dims()?;
        let mut out = vec![0.0; tx.len()];
        for (src, dst) in tx.data().chunks(cols).zip(out.chunks_mut(cols)) {
            ops::softmax_slice(src, dst);
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, cache) =
            ops::layer_norm_with_cache(self.value(x), self.value(gain), self.value(bias))?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn conv2d_valid(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let out = ops::conv2d_valid(self.value(input), self.value(kernel))?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(out, Op::Conv2d(input, kernel), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("empty row concat"))?;
        let (_, cols) = self.value(*first).matrix_dims()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims()?;
            if c != cols {
                return Err(Error::dim(format!(
                    "row concat of widths {cols} and {c}"
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("empty column concat"))?;
        let (rows, _) = self.value(*first).matrix_dims()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims()?;
            if r != rows {
                return Err(Error::dim(format!(
                    "column concat of heights {rows} and {r}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).matrix_dims()?;
        if len == 0 || start + len > rows {
            return Err(Error::dim(format!(
                "row slice {start}..{} of {rows} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(vec![len, cols], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).matrix_dims()?;
        if len == 0 || start + len > cols {
            return Err(Error::dim(format!(
                "column slice {start}..{} of {cols} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Cosine similarity between a single query row and every row of `keys`;
    /// returns a vector with one entry per key. Zero-norm pairs yield 0 and
    /// are counted in [`Graph::zero_norm_events`].
    pub fn cosine_rows(&mut self, query: Var, keys: Var) -> Result<Var> {
        let q = self.value(query);
        let (m, e) = self.value(keys).matrix_dims()?;
        if q.len() != e {
            return Err(Error::dim(format!(
                "query of {} entries against keys of width {e}",
                q.len()
            )));
        }
        let query_norm = q.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let kt = self.value(keys);
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        let mut degenerate = 0;
        for r in 0..m {
            let c = ops::cosine_similarity(q.data(), kt.row(r))?;
            if c.zero_norm {
                degenerate += 1;
            }
            norms.push(kt.row(r).iter().map(|v| v * v).sum::<f64>().sqrt());
            out.push(c.value);
        }
        self.zero_norm_events += degenerate;
        let out = Tensor::vector(out)?;
        let rg = self.any_grad(&[query, keys]);
        Ok(self.push(
            out,
            Op::CosineRows {
                query,
                keys,
                norms,
                query_norm,
            },
            rg,
        ))
    }

    /// `Σ_m weights[m] · parts[m]`.
    pub fn weighted_sum(&mut self, weights: Var, parts: &[Var]) -> Result<Var> {
        let w = self.value(weights);
        if w.len() != parts.len() {
            return Err(Error::dim(format!(
                "{} weights for {} parts",
                w.len(),
                parts.len()
            )));
        }
        let first = parts.first().ok_or_else(|| Error::dim("empty weighted sum"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut acc = vec![0.0; self.value(*first).len()];
        for (m, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            if pv.shape() != shape.as_slice() {
                return Err(Error::dim("weighted sum of differently shaped parts"));
            }
            let wm = w.data()[m];
            acc.iter_mut().zip(pv.data()).for_each(|(a, b)| *a += wm * b);
        }
        let out = Tensor::new(shape, acc)?;
        let mut deps = parts.to_vec();
        deps.push(weights);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            Op::WeightedSum {
                weights,
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross entropy of `logits` (batch × classes). Classes whose
    /// `allowed` entry is false are excluded from the normalization.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        allowed: Option<&[bool]>,
    ) -> Result<Var> {
        let lt = self.value(logits);
        let probs = ops::masked_softmax_rows(lt, labels, allowed)?;
        let (rows, cols) = lt.matrix_dims()?;
        let loss = (0..rows)
            .map(|r| -probs[r * cols + labels[r]].ln())
            .sum::<f64>()
            / rows as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ |x − target|` against a constant target.
    pub fn l1_distance(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let d = ops::l1_distance(self.value(x), target)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(d),
            Op::L1Distance {
                x,
                target: target.detached(),
            },
            rg,
        ))
    }

    /// `Σ x ⊙ weights` for a constant weight tensor of the same size.
    pub fn inner(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::dim("inner product of differently sized tensors"));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Inner {
                x,
                weights: weights.detached(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.filter(|_| self.nodes[i].requires_grad))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.matrix_dims()?;
                let (_, n) = tb.matrix_dims()?;
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            da[i * k + p] =
                                g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.matrix_dims()?;
                let (n, _) = tb.matrix_dims()?;
                if self.wants(*a) {
                    // dA = dC · B
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let brow = &tb.data()[j * k..(j + 1) * k];
                            for (d, bv) in da[i * k..(i + 1) * k].iter_mut().zip(brow) {
                                *d += gv * bv;
                            }
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    // dB = dCᵀ · A
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        let arow = &ta.data()[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, av) in db[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *d += gv * av;
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.wants(*bias) {
                    let cols = self.value(*bias).len();
                    let mut db = vec![0.0; cols];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % cols] += gv;
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let (_, cols) = node.value.matrix_dims()?;
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let (rows, cols) = node.value.matrix_dims()?;
                let gv = self.value(*gain).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * cols];
                    let n = cols as f64;
                    for r in 0..rows {
                        let xh = &cache.xhat[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dxh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum: f64 = dxh.iter().sum();
                        let sum_xh: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let is = cache.inv_std[r];
                        for c in 0..cols {
                            dx[r * cols + c] = is / n * (n * dxh[c] - sum - xh[c] * sum_xh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0; cols];
                    for (i, gv) in g.iter().enumerate() {
                        dg[i % cols] += gv * cache.xhat[i];
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; cols];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % cols] += gv;
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = g.iter().zip(xv).map(|(gv, v)| gv * ops::gelu_derivative(*v)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Conv2d(input, kernel) => {
                let (xi, ki) = (self.value(*input), self.value(*kernel));
                let (a, b) = (xi.shape()[0], xi.shape()[1]);
                let (kh, kw) = (ki.shape()[0], ki.shape()[1]);
                let (oh, ow) = (a - kh + 1, b - kw + 1);
                if self.wants(*input) {
                    let mut dx = vec![0.0; a * b];
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g[i * ow + j];
                            for p in 0..kh {
                                for q in 0..kw {
                                    dx[(i + p) * b + j + q] += gv * ki.data()[p * kw + q];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                if self.wants(*kernel) {
                    let mut dk = vec![0.0; kh * kw];
                    for p in 0..kh {
                        for q in 0..kw {
                            let mut acc = 0.0;
                            for i in 0..oh {
                                let xrow = &xi.data()[(i + p) * b + q..(i + p) * b + q + ow];
                                acc += xrow
                                    .iter()
                                    .zip(&g[i * ow..(i + 1) * ow])
                                    .map(|(x, y)| x * y)
                                    .sum::<f64>();
                            }
                            dk[p * kw + q] = acc;
                        }
                    }
                    if self.fault == Some(BackwardFault::ConvKernelGrad) {
                        dk.iter_mut().for_each(|v| *v *= 1.5);
                    }
                    self.accumulate(grads, *kernel, dk);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.matrix_dims()?;
                let mut col = 0;
                for &p in parts {
                    let (_, w) = self.value(p).matrix_dims()?;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + col..r * total + col + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let (_, cols) = src.matrix_dims()?;
                let mut dx = vec![0.0; src.len()];
                dx[start * cols..start * cols + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let (rows, cols) = src.matrix_dims()?;
                let (_, len) = node.value.matrix_dims()?;
                let mut dx = vec![0.0; src.len()];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CosineRows {
                query,
                keys,
                norms,
                query_norm,
            } => {
                let q = self.value(*query).data();
                let kt = self.value(*keys);
                let (m, e) = kt.matrix_dims()?;
                let cos = node.value.data();
                let mut dq = vec![0.0; e];
                let mut dk = vec![0.0; m * e];
                let qn = *query_norm;
                for r in 0..m {
                    let kn = norms[r];
                    if qn == 0.0 || kn == 0.0 {
                        continue;
                    }
                    let krow = kt.row(r);
                    let (gr, c) = (g[r], cos[r]);
                    for i in 0..e {
                        dq[i] += gr * (krow[i] / (qn * kn) - c * q[i] / (qn * qn));
                        dk[r * e + i] = gr * (q[i] / (qn * kn) - c * krow[i] / (kn * kn));
                    }
                }
                self.accumulate(grads, *query, dq);
                self.accumulate(grads, *keys, dk);
            }
            Op::WeightedSum { weights, parts } => {
                let w = self.value(*weights).data();
                if self.wants(*weights) {
                    let dw = parts
                        .iter()
                        .map(|&p| self.value(p).data().iter().zip(g).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *weights, dw);
                }
                for (m, &p) in parts.iter().enumerate() {
                    if self.wants(p) {
                        self.accumulate(grads, p, g.iter().map(|v| v * w[m]).collect());
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (rows, cols) = self.value(*logits).matrix_dims()?;
                let scale = g[0] / rows as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dl[r * cols + y] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::L1Distance { x, target } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            g[0]
                        } else if d < 0.0 {
                            -g[0]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Inner { x, weights } => {
                self.accumulate(grads, *x, weights.data().iter().map(|w| w * g[0]).collect());
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros shaped like `value` when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, value: &Tensor) -> Tensor {
        let data = self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; value.len()]);
        Tensor::new(value.shape().to_vec(), data).expect("gradient matches value shape")
    }
}
