//! Dense double-precision tensors with explicit shapes.

use super::AutodiffError;

/// A dense `f64` tensor. Rank 1 and 2 are the only shapes the op set
/// produces, but the container itself is rank-agnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting shape/data mismatches and non-finite
    /// literals. Arithmetic downstream may still produce NaN/Inf; only
    /// values entering from outside are screened here.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::ShapeDataMismatch {
                expected,
                actual: data.len(),
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(AutodiffError::NonFiniteLiteral { index, value });
            }
        }
        Ok(Self { shape, data })
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(data: &[f64]) -> Result<Self, AutodiffError> {
        Self::new(vec![data.len()], data.to_vec())
    }

    /// Shape `[1]` tensor holding a single value.
    pub fn scalar(value: f64) -> Result<Self, AutodiffError> {
        Self::new(vec![1], vec![value])
    }

    /// Rank-2 tensor in row-major order.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        Self::new(vec![rows, cols], data)
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape.clone())
    }

    /// Internal constructor for op outputs; shape/data agreement is the
    /// caller's invariant and non-finite values are deliberately allowed.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major matrix times vector. Shared by the tape op and the direct
/// (tape-free) model evaluation so both paths run the identical sequence
/// of floating-point operations.
pub(crate) fn matvec_data(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let rows = w.shape()[0];
    let cols = w.shape()[1];
    debug_assert_eq!(cols, x.len());
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &w.data()[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
    out
}
