//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node holding its forward value and whatever it
//! saved for the backward rule. [`Tape::backward`] walks the nodes in reverse
//! record order and accumulates adjoints. Forward values are never touched by
//! the backward pass, so several backward passes from different scalar roots
//! can share one forward recording.

use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { x: Var, index: Vec<usize> },
    Reshape(Var),
    SumAll(Var),
    Ln(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` for nodes that were
    /// not marked as requiring gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

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

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
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
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (k2, p) = bv.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * p];
        kernels::matmul(av.data(), bv.data(), &mut out, m, k, p);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, p, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a vector of length `n` to every last-axis slice of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let n = xv.last_dim();
        if rv.len() != n {
            return Err(Error::dim("add_row", xv.shape(), rv.shape()));
        }
        let r = rv.data();
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplies every last-axis slice of `x` elementwise by `row`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let n = xv.last_dim();
        if rv.len() != n {
            return Err(Error::dim("mul_row", xv.shape(), rv.shape()));
        }
        let r = rv.data();
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(a, b)| a * b))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(out, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), softmax_rows(xv.data(), xv.last_dim()))
            .expect("softmax preserves shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Normalizes each last-axis slice to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.len() / n);
        for row in xv.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            out.extend(row.iter().map(|v| (v - mean) * is));
            inv_std.push(is);
        }
        let out = Tensor::new(xv.shape().to_vec(), out).expect("layernorm preserves shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::LayerNorm { x, inv_std }, rg)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
            0.5 * v * (1.0 + t)
        });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let d = xv.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(x), rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let d = xv.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::matrix(r, len, out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.value(parts[0]).shape(), &[r, c]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).dims2()?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::dim("concat_rows", self.value(parts[0]).shape(), &[r, c]));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// `out[i] = x[index[i]]` reshaped to `shape`. Covers row selection,
    /// column gathers and the patch layout permutation.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Index {
                what: "gather",
                index: bad,
                len: xv.len(),
            });
        }
        let d = xv.data();
        let out = Tensor::new(shape, index.iter().map(|&i| d[i]).collect())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Gather { x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::vector(vec![s]), Op::SumAll(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Ln(x), rg)
    }

    /// `-log softmax(logits)[target]` over the flattened logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if target >= lv.len() {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: target,
                len: lv.len(),
            });
        }
        let probs = softmax_rows(lv.data(), lv.len());
        let d = lv.data();
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + d.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - d[target];
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::vector(vec![loss]),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root. Every node marked as requiring
    /// gradients gets an entry (zeros when it does not influence the root).
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::dim("backward root must be scalar", rv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                node.requires_grad.then(|| match g {
                    Some(g) => Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"),
                    None => Tensor::zeros(node.value.shape()),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let p = bv.shape()[1];
                self.accumulate(grads, *a, |ga| kernels::matmul_a_bt(g, bv.data(), ga, m, k, p));
                self.accumulate(grads, *b, |gb| kernels::matmul_at_b(av.data(), g, gb, m, k, p));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |gv| add_into(gv, g));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                let n = out.last_dim();
                self.accumulate(grads, *row, |gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::MulRow(x, row) => {
                let n = out.last_dim();
                let (xv, rv) = (self.value(*x).data(), self.value(*row).data());
                self.accumulate(grads, *x, |gx| {
                    for (i, (o, gi)) in gx.iter_mut().zip(g).enumerate() {
                        *o += gi * rv[i % n];
                    }
                });
                self.accumulate(grads, *row, |gr| {
                    for (i, (gi, xi)) in g.iter().zip(xv).enumerate() {
                        gr[i % n] += gi * xi;
                    }
                });
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += gi * factor;
                    }
                });
            }
            Op::Softmax(x) => {
                let n = out.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for ((gxr, yr), gr) in gx.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gi)| y * gi).sum();
                        for ((o, y), gi) in gxr.iter_mut().zip(yr).zip(gr) {
                            *o += y * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let n = out.last_dim();
                let nf = n as f64;
                self.accumulate(grads, *x, |gx| {
                    for (((gxr, yr), gr), is) in gx
                        .chunks_mut(n)
                        .zip(out.data().chunks(n))
                        .zip(g.chunks(n))
                        .zip(inv_std)
                    {
                        let mean_g = gr.iter().sum::<f64>() / nf;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for ((o, y), gi) in gxr.iter_mut().zip(yr).zip(gr) {
                            *o += is * (gi - mean_g - y * mean_gy);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *o += gi * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Transpose(x) => {
                // out is c×r, x is r×c
                let (c, r) = (out.shape()[0], out.shape()[1]);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (r, len) = (out.shape()[0], out.shape()[1]);
                let c = self.value(*x).shape()[1];
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        add_into(&mut gx[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    self.accumulate(grads, p, |gp| {
                        for i in 0..rows {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Gather { x, index } => {
                self.accumulate(grads, *x, |gx| {
                    for (&i, gi) in index.iter().zip(g) {
                        gx[i] += gi;
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
            }
            Op::SumAll(x) => {
                self.accumulate(grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi / v;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                self.accumulate(grads, *logits, |gl| {
                    for (i, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        *o += g[0] * (p - onehot);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Softmax of each consecutive `n`-length slice, shifted by its max.
pub fn softmax_rows(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= sum;
        }
    }
    out
}
