use serde::{Deserialize, Serialize};

use super::TensorError;

/// Element precision of a [`Tensor`].
///
/// Values are held as `f64` internally. A `F32` tensor keeps every stored
/// value exactly representable in single precision: each op rounds its
/// output through `f32` before it is stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            DType::F32 => x as f32 as f64,
            DType::F64 => x,
        }
    }

    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    requires_grad: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, rounding values to `dtype` and rejecting non-finite input.
    pub fn new(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Result<Self, TensorError> {
        if numel(&shape) != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Self::from_parts(shape, data, dtype, "tensor")
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        mut data: Vec<f64>,
        dtype: DType,
        op: &'static str,
    ) -> Result<Self, TensorError> {
        debug_assert_eq!(numel(&shape), data.len());
        if dtype == DType::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(Self {
            shape,
            dtype,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        Self {
            shape: shape.to_vec(),
            dtype,
            data: vec![0.0; numel(shape)],
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Self {
        let mut t = Self::zeros(shape, dtype);
        let v = dtype.round(value);
        t.data.iter_mut().for_each(|x| *x = v);
        t
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::full(&[], value, dtype)
    }

    /// Convenience constructor for a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[f64]], dtype: DType) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::InvalidArgument("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data, dtype)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Callers must keep them finite and
    /// representable in the tensor's dtype; see [`Tensor::normalize`].
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Re-rounds every value to the tensor's dtype and checks finiteness.
    pub fn normalize(&mut self) -> Result<(), TensorError> {
        let dtype = self.dtype;
        for v in self.data.iter_mut() {
            *v = dtype.round(*v);
            if !v.is_finite() {
                return Err(TensorError::NonFinite { op: "normalize" });
            }
        }
        Ok(())
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(TensorError::RankMismatch {
                op: "dims2",
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize), TensorError> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(TensorError::RankMismatch {
                op: "dims3",
                expected: 3,
                shape: self.shape.clone(),
            }),
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalarLoss {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn to_dtype(&self, dtype: DType) -> Self {
        let mut out = self.clone();
        out.dtype = dtype;
        for v in out.data.iter_mut() {
            *v = dtype.round(*v);
        }
        out
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let mut out = self.clone();
        out.shape = shape.to_vec();
        Ok(out)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row `i` of the tensor viewed as `[numel / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }
}
