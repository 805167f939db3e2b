//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive applied through a [`Tape`] appends a node holding its
//! forward value and enough information to run its backward rule. Nodes are
//! appended in evaluation order, so the tape is always topologically sorted
//! and a single reverse sweep propagates gradients. Gradients accumulate
//! additively, so a value consumed twice receives the sum of both paths.
//!
//! A node requires a gradient only if one of its inputs does. Sub-graphs
//! built purely from constants (e.g. a frozen model's decoder prefix) keep no
//! backward state at all.
//!
//! ```
//! use hyperprompt::autodiff::Tape;
//! use hyperprompt::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let a = tape.param(Tensor::from_rows(&[vec![1.0, 2.0]]));
//! let b = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
//! let y = tape.matmul(a, b).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(tape.value(loss).item(), 11.0);
//! assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
//! ```

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad_scalar(x: f64) -> f64 {
    std_normal_cdf(x) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m×p]`, `b: [q×p]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.value(a).dims2()?;
        let (q, p2) = self.value(b).dims2()?;
        if p != p2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * q];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, p, q);
        let value = Tensor::new([m, q], out)?;
        Ok(self.push(value, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a vector `b: [n]` to every row of `x: [..×n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, n) = self.value(x).rows_last();
        let bias = self.value(b);
        if bias.ndim() != 1 || bias.numel() != n {
            return Err(Error::dim("add_row", self.shape(x), bias.shape()));
        }
        let mut value = self.value(x).clone();
        let bd = bias.data().to_vec();
        for r in 0..rows {
            for (o, bv) in value.data_mut()[r * n..(r + 1) * n].iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        Ok(self.push(value, Op::AddRow(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// Exact GeLU, `x·Φ(x)` with the erf-based normal CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis. With `causal`, entry `(i, j)` of a 2-D
    /// input is masked out whenever `j > i`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (rows, n) = self.value(x).rows_last();
        if causal {
            self.value(x).dims2()?;
        }
        let mut value = self.value(x).clone();
        for (r, row) in value.data_mut().chunks_mut(n).enumerate().take(rows) {
            let visible = if causal { (r + 1).min(n) } else { n };
            let max = row[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in &mut row[..visible] {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in &mut row[..visible] {
                *v /= total;
            }
            for v in &mut row[visible..] {
                *v = 0.0;
            }
        }
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Normalizes each position over the last axis to zero mean and unit
    /// (population) variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.value(x).rows_last();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::dim("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Stacks 2-D inputs with equal column counts along the row (sequence)
    /// axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new([rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins 2-D inputs with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new([rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Gathers rows of `table: [V×d]`; the backward rule scatter-adds.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::dim("embedding", self.shape(table), &[0]));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: vocab,
                });
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::new([ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, stabilized by
    /// subtracting each row's max.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (batch, vocab) = self.value(logits).dims2()?;
        if targets.len() != batch {
            return Err(Error::dim("softmax_cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let l = self.value(logits).data();
        let mut probs = vec![0.0; batch * vocab];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::Index {
                    what: "cross-entropy target",
                    index: t,
                    bound: vocab,
                });
            }
            let row = &l[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[t];
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let value = Tensor::scalar(loss / batch as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::dim("backward (scalar output)", self.shape(output), &[1]));
        }
        self.backward_from(vec![(output, Tensor::new(self.shape(output).to_vec(), vec![1.0])?)])
    }

    /// Backpropagates arbitrary upstream gradients (a vector-Jacobian
    /// product). Seeds for the same node add up.
    pub fn backward_from(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(v) {
                return Err(Error::dim("backward seed", self.shape(v), g.shape()));
            }
            start = start.max(v.0 + 1);
            accumulate(&mut grads, v, g);
        }
        for i in (0..start).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, p) = self.value(a).dims2()?;
                let q = self.value(b).dims2()?.1;
                if self.wants(a) {
                    let mut ga = vec![0.0; m * p];
                    gemm_nt(g.data(), self.value(b).data(), &mut ga, m, q, p);
                    accumulate(grads, a, Tensor::new([m, p], ga)?);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; p * q];
                    gemm_tn(self.value(a).data(), g.data(), &mut gb, p, m, q);
                    accumulate(grads, b, Tensor::new([p, q], gb)?);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (m, p) = self.value(a).dims2()?;
                let q = self.value(b).dims2()?.0;
                if self.wants(a) {
                    let mut ga = vec![0.0; m * p];
                    gemm_nn(g.data(), self.value(b).data(), &mut ga, m, q, p);
                    accumulate(grads, a, Tensor::new([m, p], ga)?);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; q * p];
                    gemm_tn(g.data(), self.value(a).data(), &mut gb, q, m, p);
                    accumulate(grads, b, Tensor::new([q, p], gb)?);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, g.map(|v| -v));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y)?);
                }
                if self.wants(b) {
                    accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y)?);
                }
            }
            &Op::AddRow(x, b) => {
                if self.wants(x) {
                    accumulate(grads, x, g.clone());
                }
                if self.wants(b) {
                    let (_, n) = g.rows_last();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, b, Tensor::new([n], gb)?);
                }
            }
            &Op::Scale(x, s) => accumulate(grads, x, g.map(|v| v * s)),
            &Op::Gelu(x) => {
                let gx = g.zip_map(self.value(x), |gv, xv| gv * gelu_grad_scalar(xv))?;
                accumulate(grads, x, gx);
            }
            &Op::Softmax(x) => {
                let y = &node.value;
                let (_, n) = y.rows_last();
                let mut gx = vec![0.0; y.numel()];
                for ((yr, gr), out) in y
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(gx.chunks_mut(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(grads, x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, d) = g.rows_last();
                let gd = g.data();
                let gain_v = self.value(*gain).data();
                if self.wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                    accumulate(grads, *gain, Tensor::new([d], gg)?);
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; d];
                    for row in gd.chunks(d) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *bias, Tensor::new([d], gb)?);
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; rows * d];
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gd[r * d + j] * gain_v[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[r * d + j];
                        }
                        let k = inv_std[r] / d as f64;
                        for j in 0..d {
                            gx[r * d + j] =
                                k * (d as f64 * dxhat[j] - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        let part = g.data()[offset..offset + n].to_vec();
                        accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), part)?);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    if self.wants(p) {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        accumulate(grads, p, Tensor::new([rows, w], part)?);
                    }
                    offset += w;
                }
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = self.value(*table).dims2()?;
                let mut gt = vec![0.0; vocab * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g.data()[r * d + j];
                    }
                }
                accumulate(grads, *table, Tensor::new([vocab, d], gt)?);
            }
            &Op::Reshape(x) => accumulate(grads, x, g.reshape(self.shape(x).to_vec())?),
            &Op::Transpose(x) => accumulate(grads, x, g.transpose()?),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (batch, vocab) = self.value(*logits).dims2()?;
                let scale = g.item() / batch as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * vocab + t] -= scale;
                }
                accumulate(grads, *logits, Tensor::new([batch, vocab], gl)?);
            }
            &Op::Sum(x) => accumulate(grads, x, Tensor::full(self.shape(x).to_vec(), g.item())),
            &Op::Mean(x) => {
                let n = self.value(x).numel() as f64;
                accumulate(grads, x, Tensor::full(self.shape(x).to_vec(), g.item() / n));
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
