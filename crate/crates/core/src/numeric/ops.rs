//! Forward kernels shared by the tape and by callers that only need values.

use rand::Rng;

use super::tensor::numel;
use super::{DType, Tensor, TensorError};

/// Ignore label shared by every label channel.
pub const IGNORE_INDEX: i64 = -1;

pub(crate) fn same_dtype(op: &'static str, a: &Tensor, b: &Tensor) -> Result<DType, TensorError> {
    if a.dtype() != b.dtype() {
        return Err(TensorError::DTypeMismatch {
            op,
            left: a.dtype(),
            right: b.dtype(),
        });
    }
    Ok(a.dtype())
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `c (+)= op(a) · op(b)` where `op` optionally transposes a row-major operand.
///
/// `a` is `m×k` (stored `k×m` when `trans_a`), `b` is `k×n` (stored `n×k`
/// when `trans_b`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let dtype = same_dtype("matmul", a, b)?;
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::from_parts(vec![m, n], out, dtype, "matmul")
}

#[inline]
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// d/dx of the exact-erf GELU: Φ(x) + x·φ(x).
#[inline]
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Exact-erf GELU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu(x: &Tensor) -> Result<Tensor, TensorError> {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::from_parts(x.shape().to_vec(), data, x.dtype(), "gelu")
}

/// Softmax of one row into `out`. Entries with `mask[j] == false` get
/// probability exactly zero and do not take part in the normalization.
pub(crate) fn softmax_row(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| keep(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(row).enumerate() {
        *o = if keep(j) { (v - max).exp() } else { 0.0 };
        sum += *o;
    }
    out.iter_mut().for_each(|v| *v /= sum);
}

/// Softmax along the last axis, max-shifted.
pub fn softmax(logits: &Tensor) -> Result<Tensor, TensorError> {
    masked_softmax(logits, None)
}

/// Softmax along the last axis where `mask` (same length as the tensor)
/// excludes entries.
pub fn masked_softmax(logits: &Tensor, mask: Option<&[bool]>) -> Result<Tensor, TensorError> {
    let k = logits.last_dim();
    if k == 0 {
        return Err(TensorError::InvalidArgument("softmax over empty axis".into()));
    }
    if let Some(m) = mask {
        if m.len() != logits.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                left: logits.shape().to_vec(),
                right: vec![m.len()],
            });
        }
    }
    let mut out = vec![0.0; logits.numel()];
    for (r, (row, o)) in logits
        .data()
        .chunks(k)
        .zip(out.chunks_mut(k))
        .enumerate()
    {
        softmax_row(row, mask.map(|m| &m[r * k..(r + 1) * k]), o);
    }
    Tensor::from_parts(logits.shape().to_vec(), out, logits.dtype(), "softmax")
}

/// Per-row normalization statistics kept for the backward pass.
pub(crate) struct LayerNormCache {
    pub normed: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache), TensorError> {
    let dtype = same_dtype("layer_norm", x, gamma)?;
    same_dtype("layer_norm", x, beta)?;
    let h = x.last_dim();
    if gamma.shape() != [h] || beta.shape() != [h] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    if eps < 0.0 || !eps.is_finite() {
        return Err(TensorError::InvalidArgument(format!("layer_norm eps {eps}")));
    }
    let rows = x.numel() / h.max(1);
    let mut normed = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * h..(r + 1) * h];
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let denom = (var + eps).sqrt();
        let istd = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        inv_std[r] = istd;
        for j in 0..h {
            let n = (row[j] - mean) * istd;
            normed[r * h + j] = n;
            out[r * h + j] = gamma.data()[j] * n + beta.data()[j];
        }
    }
    let y = Tensor::from_parts(x.shape().to_vec(), out, dtype, "layer_norm")?;
    Ok((y, LayerNormCache { normed, inv_std }))
}

/// `gamma ⊙ (x − μ)/√(σ² + eps) + beta` over the last axis, σ² the
/// population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
    layer_norm_forward(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Mean cross-entropy over the labeled rows of a logit matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub correct: usize,
    pub labeled: usize,
}

pub(crate) fn cross_entropy_forward(
    logits: &Tensor,
    labels: &[i64],
) -> Result<(CrossEntropy, Vec<f64>), TensorError> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "masked_cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut probs = vec![0.0; n * k];
    let mut total = 0.0;
    let mut correct = 0;
    let mut labeled = 0;
    for (r, &label) in labels.iter().enumerate() {
        if label == IGNORE_INDEX {
            continue;
        }
        if label < 0 || label as usize >= k {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let row = &logits.data()[r * k..(r + 1) * k];
        let p = &mut probs[r * k..(r + 1) * k];
        softmax_row(row, None, p);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label as usize];
        // first maximal index wins ties
        let argmax = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
            .0;
        if argmax == label as usize {
            correct += 1;
        }
        labeled += 1;
    }
    if labeled == 0 {
        return Err(TensorError::EmptyLabelSet);
    }
    let loss = logits.dtype().round(total / labeled as f64);
    if !loss.is_finite() {
        return Err(TensorError::NonFinite { op: "masked_cross_entropy" });
    }
    Ok((CrossEntropy { loss, correct, labeled }, probs))
}

/// Mean negative log-likelihood over rows whose label is not [`IGNORE_INDEX`].
pub fn masked_cross_entropy(logits: &Tensor, labels: &[i64]) -> Result<CrossEntropy, TensorError> {
    cross_entropy_forward(logits, labels).map(|(ce, _)| ce)
}

/// Inverted-dropout scale factors: `0` for dropped elements, `1/(1-p)` for
/// survivors.
pub(crate) fn dropout_scales<R: Rng + ?Sized>(
    len: usize,
    p: f64,
    rng: &mut R,
) -> Result<Vec<f64>, TensorError> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::InvalidProbability(p));
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect())
}

/// Inverted dropout. Identity when `training` is false or `p == 0`.
pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor, TensorError> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::InvalidProbability(p));
    }
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let scales = dropout_scales(x.numel(), p, rng)?;
    let data = x.data().iter().zip(&scales).map(|(v, s)| v * s).collect();
    Tensor::from_parts(x.shape().to_vec(), data, x.dtype(), "dropout")
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves axis `axes[i]` of the input to position `i` of the output.
pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(&out_shape);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(data[offset]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
