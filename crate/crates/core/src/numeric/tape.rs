//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and enough saved state
//! to produce input gradients. [`Tape::backward`] walks the nodes once in
//! reverse order.

use std::sync::Arc;

use rand::Rng;

use super::ops::{
    self, cross_entropy_forward, dropout_scales, gelu_grad_scalar, gemm,
    inverse_axes, layer_norm_forward, permute_data, same_dtype, same_shape, CrossEntropy,
};
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Gelu { x: Var },
    Tanh { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var },
    Dropout { x: Var, scales: Vec<f64> },
    GatherRows { table: Var, ids: Vec<usize> },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    CrossEntropy { logits: Var, labels: Arc<[i64]>, probs: Vec<f64>, labeled: usize },
    Sum { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(Vec<usize>, super::DType)>,
}

impl Gradients {
    /// Gradient of `var`, or zeros of its shape when the loss does not
    /// depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let (shape, dtype) = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => {
                let mut t = Tensor::zeros(shape, *dtype);
                t.data_mut().copy_from_slice(g);
                // gradients stay in f64 arithmetic; round once on extraction
                let _ = t.normalize();
                t
            }
            None => Tensor::zeros(shape, *dtype),
        }
    }

    /// Raw `f64` gradient values, unrounded.
    pub fn raw(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, &[])
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product over the leading axis: `[N×m×k]·[N×k×n]`, or
    /// `[N×m×k]·[N×n×k]ᵀ` with `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let dtype = same_dtype("batch_matmul", av, bv)?;
        let (na, m, k) = av.dims3()?;
        let (nb, b1, b2) = bv.dims3()?;
        let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if na != nb || k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "batch_matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; na * m * n];
        for i in 0..na {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let t = Tensor::from_parts(vec![na, m, n], out, dtype, "batch_matmul")?;
        Ok(self.push(t, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        xv.dims2()?;
        let (shape, data) = permute_data(xv.data(), xv.shape(), &[1, 0]);
        let t = Tensor::from_parts(shape, data, xv.dtype(), "transpose")?;
        Ok(self.push(t, Op::Transpose { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let dtype = same_dtype("add", av, bv)?;
        same_shape("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data, dtype, "add")?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a `[C]` vector to every row of a `[..., C]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let dtype = same_dtype("add_bias", xv, bv)?;
        let c = xv.last_dim();
        if bv.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % c])
            .collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data, dtype, "add_bias")?;
        Ok(self.push(t, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let dtype = same_dtype("mul", av, bv)?;
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data, dtype, "mul")?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data, xv.dtype(), "scale")?;
        Ok(self.push(t, Op::Scale { x, factor }, &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = ops::gelu(self.value(x))?;
        Ok(self.push(t, Op::Gelu { x }, &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data, xv.dtype(), "tanh")?;
        Ok(self.push(t, Op::Tanh { x }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (t, cache) = layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            normed: cache.normed,
            inv_std: cache.inv_std,
        };
        Ok(self.push(t, op, &[x, gamma, beta]))
    }

    /// Softmax over the last axis. Entries where `mask` is false receive
    /// probability zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let t = ops::masked_softmax(self.value(x), mask)?;
        Ok(self.push(t, Op::Softmax { x }, &[x]))
    }

    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let scales = dropout_scales(xv.numel(), p, rng)?;
        let data = xv.data().iter().zip(&scales).map(|(v, s)| v * s).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data, xv.dtype(), "dropout")?;
        Ok(self.push(t, Op::Dropout { x, scales }, &[x]))
    }

    /// Selects rows of a `[R×C]` table: output `[ids.len()×C]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        let (rows, cols) = tv.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { index: id, len: rows });
            }
            data.extend_from_slice(&tv.data()[id * cols..(id + 1) * cols]);
        }
        let t = Tensor::from_parts(vec![ids.len(), cols], data, tv.dtype(), "gather_rows")?;
        Ok(self.push(t, Op::GatherRows { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..xv.rank()).collect::<Vec<_>>() {
            return Err(TensorError::InvalidArgument(format!(
                "permutation {axes:?} for rank {}",
                xv.rank()
            )));
        }
        let (shape, data) = permute_data(xv.data(), xv.shape(), axes);
        let t = Tensor::from_parts(shape, data, xv.dtype(), "permute")?;
        Ok(self.push(t, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Masked mean cross-entropy of `[N×K]` logits. Returns the scalar loss
    /// node together with the accuracy counts.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<(Var, CrossEntropy), TensorError> {
        let lv = self.value(logits);
        let (ce, probs) = cross_entropy_forward(lv, labels)?;
        let t = Tensor::from_parts(vec![], vec![ce.loss], lv.dtype(), "masked_cross_entropy")?;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.into(),
            probs,
            labeled: ce.labeled,
        };
        Ok((self.push(t, op, &[logits]), ce))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let s = xv.data().iter().sum();
        let t = Tensor::from_parts(vec![], vec![s], xv.dtype(), "sum")?;
        Ok(self.push(t, Op::Sum { x }, &[x]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| (n.value.shape().to_vec(), n.value.dtype()))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = val(*a).dims2().expect("matmul lhs");
                let n = val(*b).shape()[1];
                self.accumulate(grads, *a, |ga| gemm(m, n, k, g, false, val(*b).data(), true, ga, true));
                self.accumulate(grads, *b, |gb| gemm(k, m, n, val(*a).data(), true, g, false, gb, true));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (batch, m, k) = val(*a).dims3().expect("bmm lhs");
                let n = node.value.shape()[2];
                let (av, bv) = (val(*a).data(), val(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        // dA = G·Bᵀ, or G·B when B was used transposed
                        gemm(m, n, k, gi, false, bi, !trans_b, &mut ga[i * m * k..(i + 1) * m * k], true);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B stored n×k: dB = Gᵀ·A
                            gemm(n, m, k, gi, true, ai, false, out, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, out, true);
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let (shape, data) = permute_data(g, node.value.shape(), &[1, 0]);
                debug_assert_eq!(shape, val(*x).shape());
                self.accumulate(grads, *x, |gx| add_into(gx, &data));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                let c = val(*bias).numel();
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
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
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |gx| {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += gi * factor;
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = val(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_grad_scalar(*xi);
                    }
                });
            }
            Op::Tanh { x } => {
                let yv = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), yi) in gx.iter_mut().zip(g).zip(yv) {
                        *o += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, normed, inv_std } => {
                let h = val(*gamma).numel();
                let gam = val(*gamma).data();
                self.accumulate(grads, *x, |gx| {
                    let mut dn = vec![0.0; h];
                    for (r, &istd) in inv_std.iter().enumerate() {
                        let gr = &g[r * h..(r + 1) * h];
                        let nr = &normed[r * h..(r + 1) * h];
                        let mut sum_dn = 0.0;
                        let mut sum_dn_n = 0.0;
                        for j in 0..h {
                            dn[j] = gr[j] * gam[j];
                            sum_dn += dn[j];
                            sum_dn_n += dn[j] * nr[j];
                        }
                        let hf = h as f64;
                        for j in 0..h {
                            gx[r * h + j] += istd / hf * (hf * dn[j] - sum_dn - nr[j] * sum_dn_n);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| {
                    for (gr, nr) in g.chunks(h).zip(normed.chunks(h)) {
                        for j in 0..h {
                            gg[j] += gr[j] * nr[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for gr in g.chunks(h) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Softmax { x } => {
                let k = node.value.last_dim();
                let p = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((gr, pr), out) in g.chunks(k).zip(p.chunks(k)).zip(gx.chunks_mut(k)) {
                        let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            out[j] += pr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Dropout { x, scales } => {
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), s) in gx.iter_mut().zip(g).zip(scales) {
                        *o += gi * s;
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let cols = val(*table).shape()[1];
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
            }
            Op::Permute { x, axes } => {
                let (_, data) = permute_data(g, node.value.shape(), &inverse_axes(axes));
                self.accumulate(grads, *x, |gx| add_into(gx, &data));
            }
            Op::CrossEntropy { logits, labels, probs, labeled } => {
                let k = val(*logits).last_dim();
                let scale = g[0] / *labeled as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        if label < 0 {
                            continue;
                        }
                        let row = &mut gl[r * k..(r + 1) * k];
                        for j in 0..k {
                            row[j] += scale * probs[r * k + j];
                        }
                        row[label as usize] -= scale;
                    }
                });
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
