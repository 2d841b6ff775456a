//! Dense fp64 tensors with row-major flat storage.
//!
//! Shapes are explicit and every dimension is at least 1; a scalar is a
//! one-element tensor of shape `[1]`. There is no general broadcasting —
//! the only shape-mixing operation the graph offers is bias addition along
//! the last dimension.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} has product {expected} but data has {actual} elements")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} contains a zero dimension")]
    ZeroDim(Vec<usize>),
    #[error("dimension mismatch between {left:?} and {right:?} in {op}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} requires a rank-{expected} operand, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("width {width} is not divisible by {n_heads} attention heads")]
    HeadDivisibility { width: usize, n_heads: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter '{0}' has no gradient")]
    MissingGrad(String),
    #[error("column slice {start}..{end} out of range for {cols} columns")]
    ColSliceOutOfRange {
        start: usize,
        end: usize,
        cols: usize,
    },
    #[error("row index {index} out of range for table with {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("cannot reshape {from:?} ({from_elems} elements) into {to:?} ({to_elems} elements)")]
    ReshapeMismatch {
        from: Vec<usize>,
        from_elems: usize,
        to: Vec<usize>,
        to_elems: usize,
    },
    #[error("operation '{op}' needs at least one operand")]
    EmptyOperands { op: &'static str },
}

/// Dense N-dimensional array of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                expected,
                actual: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar shape is always valid")
    }

    /// Rank-2 tensor from row vectors; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::ZeroDim(vec![0]));
        }
        let cols = rows[0].len();
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::DimMismatch {
                    op: "from_rows",
                    left: vec![rows.len(), cols],
                    right: vec![rows.len(), r.len()],
                });
            }
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}
