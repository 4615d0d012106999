//! Dense row-major tensors.

use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
}

/// Dense n-dimensional array with a shared, copy-on-write buffer.
///
/// Cloning is cheap; the buffer is only duplicated when a clone is mutated
/// through [`Tensor::data_mut`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that every extent is positive and that the
    /// buffer length equals the product of the shape.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("positive shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..numel).map(&mut f).collect()).expect("positive shape")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the buffer, detaching it from other clones first.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Same buffer viewed under a different shape of equal size.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        })
    }

    /// Rows/cols of a matrix; a vector is treated as a single row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (
                self.shape[..self.shape.len() - 1].iter().product(),
                *self.shape.last().unwrap(),
            ),
        }
    }

    /// Copy of the top-left `rows × cols` block, keeping the tensor's rank.
    ///
    /// Vectors are treated as a single row, so only `cols` applies to them.
    pub fn top_left(&self, rows: usize, cols: usize) -> Result<Self, TensorError> {
        let (r, c) = self.matrix_dims();
        let rows = if self.shape.len() == 1 { 1 } else { rows };
        if rows == 0 || cols == 0 || rows > r || cols > c {
            return Err(TensorError::InvalidShape {
                op: "top_left",
                shape: self.shape.clone(),
                reason: format!("block {rows}x{cols} outside {r}x{c}"),
            });
        }
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.data.chunks(c).take(rows) {
            out.extend_from_slice(&row[..cols]);
        }
        let shape = if self.shape.len() == 1 {
            vec![cols]
        } else {
            vec![rows, cols]
        };
        Ok(Self::new(shape, out)?.with_requires_grad(self.requires_grad))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (*a - *b).abs())
                .fold(T::zero(), T::max),
        )
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                    .collect(),
            ),
            requires_grad: self.requires_grad,
        }
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().map(f64::to_bits) == b.to_f64().map(f64::to_bits))
    }
}
