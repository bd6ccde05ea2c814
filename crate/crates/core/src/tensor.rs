//! Dense row-major tensors over `f64`.
//!
//! Every real-valued quantity in the crate (weights, biases, activations,
//! images, gradients) lives in a [`Tensor`]. Layout is row-major with the
//! last dimension fastest; four-dimensional tensors are interpreted as
//! batch x channels x height x width.

use thiserror::Error;

/// Maximum number of dimensions a [`Shape`] may carry.
pub const MAX_DIMS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: &'static str },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("matmul dimension mismatch: [{m}x{k}] . [{k2}x{n}]")]
    MatmulDimMismatch { m: usize, k: usize, k2: usize, n: usize },
    #[error("element count mismatch: {have} elements cannot fill shape of {want}")]
    CountMismatch { have: usize, want: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("expected a {want}-dimensional tensor, got {got} dimensions")]
    RankMismatch { want: usize, got: usize },
}

/// Validated tensor shape: 1 to 4 dimensions, every dimension at least 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > MAX_DIMS {
            return Err(TensorError::InvalidShape {
                dims: dims.to_vec(),
                reason: "dimension count must be between 1 and 4",
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                dims: dims.to_vec(),
                reason: "every dimension must be at least 1",
            });
        }
        let mut count = 1usize;
        for &d in dims {
            count = count.checked_mul(d).ok_or(TensorError::InvalidShape {
                dims: dims.to_vec(),
                reason: "element count overflows",
            })?;
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    /// Total element count (product of dimensions).
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

/// Dense `f64` tensor. Operations are pure: inputs are never modified and
/// results are fresh tensors. Constructors reject non-finite entries;
/// arithmetic assumes finite inputs of reasonable magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { index: 0 });
        }
        let n = shape.numel();
        Ok(Tensor { shape, data: vec![value; n] })
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::CountMismatch { have: data.len(), want: shape.numel() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for computed results. Skips the finiteness scan:
    /// divergence is detected at the loss, not per intermediate tensor.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row-major flat index of a coordinate: entry (n, c, h, w) of a
    /// 4-dimensional tensor lives at ((n*C + c)*H + h)*W + w.
    pub fn flat_index(&self, coords: &[usize]) -> usize {
        let dims = self.shape.dims();
        assert_eq!(coords.len(), dims.len(), "coordinate rank mismatch");
        let mut idx = 0usize;
        for (&c, &d) in coords.iter().zip(dims) {
            assert!(c < d, "coordinate {c} out of bounds for dimension {d}");
            idx = idx * d + c;
        }
        idx
    }

    pub fn at(&self, coords: &[usize]) -> f64 {
        self.data[self.flat_index(coords)]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data.iter().map(|&a| a * factor).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    /// Standard matrix product of two 2-dimensional tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape.ndim() != 2 {
            return Err(TensorError::RankMismatch { want: 2, got: self.shape.ndim() });
        }
        if other.shape.ndim() != 2 {
            return Err(TensorError::RankMismatch { want: 2, got: other.shape.ndim() });
        }
        let (m, k) = (self.dims()[0], self.dims()[1]);
        let (k2, n) = (other.dims()[0], other.dims()[1]);
        if k != k2 {
            return Err(TensorError::MatmulDimMismatch { m, k, k2, n });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                let rhs_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: Shape::new(&[m, n]).expect("matmul output shape"), data: out })
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshape(&self, new_shape: Shape) -> Result<Tensor, TensorError> {
        if new_shape.numel() != self.numel() {
            return Err(TensorError::CountMismatch { have: self.numel(), want: new_shape.numel() });
        }
        Ok(Tensor { shape: new_shape, data: self.data.clone() })
    }

    /// Collapse everything to a single dimension.
    pub fn flatten(&self) -> Tensor {
        Tensor {
            shape: Shape::new(&[self.numel()]).expect("flatten shape"),
            data: self.data.clone(),
        }
    }
}
