//! Minimal dense-tensor arithmetic with reverse-mode gradients.
//!
//! Values are f32 in row-major order; reductions (matmul, norms, means)
//! accumulate in f64. Every operation checks its output for NaN/Inf and
//! reports non-finite results as errors instead of propagating them.

mod adam;
mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use tape::{quantize_value, surrogate_value, Gradients, Op, Tape, VarId};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(NumericsError::ShapeMismatch {
                op: "Tensor::new",
                detail: format_shape(&shape),
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    /// Construct without the finiteness scan; for op outputs that are checked
    /// separately.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, NumericsError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor { shape: vec![n, n], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows/cols of a 1-D (treated as a single row) or 2-D tensor.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<(), NumericsError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }
}

fn format_shape(shape: &[usize]) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    let _ = write!(s, "{:?}", shape);
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NumericsError {
    ShapeMismatch { op: &'static str, detail: String },
    NonFinite { op: &'static str },
    NonScalarLoss { numel: usize },
    UnknownVar { index: usize },
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            NumericsError::NonFinite { op } => write!(f, "non-finite output in {op}"),
            NumericsError::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            NumericsError::UnknownVar { index } => {
                write!(f, "variable {index} is not on this tape")
            }
        }
    }
}

impl core::error::Error for NumericsError {}
