//! Dense row-major `f64` tensors.
//!
//! This is deliberately minimal: the engine only needs owned, contiguous,
//! CPU-resident arrays with shape metadata. All arithmetic is done in 64-bit
//! floats regardless of the on-disk weight dtype so that conservation checks
//! downstream have numerical headroom.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("matmul requires rank-2 operands, got {left:?} x {right:?}")]
    MatmulRank { left: Vec<usize>, right: Vec<usize> },
    #[error("division by exactly zero at flat index {index} (use div_ieee for IEEE semantics)")]
    ZeroDivisor { index: usize },
    #[error("cannot reshape {from:?} ({from_len} elements) into {to:?} ({to_len} elements)")]
    ReshapeLen {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
        to_len: usize,
    },
}

/// Elementwise binary operations understood by [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

/// Right-hand side of an elementwise operation: a tensor of equal shape or a
/// scalar broadcast to every element.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

/// Dense tensor: row-major `f64` data plus a shape.
///
/// Invariants (enforced by every constructor):
/// - `data.len() == shape.iter().product()`
/// - shape is non-empty and every dimension is at least 1
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("shape implies {} elements, data has {}", len, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let len = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; len],
        })
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self, TensorError> {
        let len = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![value; len],
        })
    }

    /// Rank-1 tensor from a slice.
    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "rank-1 tensor needs at least one element");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// n-by-n identity matrix.
    pub fn identity(n: usize) -> Self {
        assert!(n >= 1);
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            shape: vec![n, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        // Unreachable for valid tensors; kept for clippy's sake.
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value at a flat (row-major) index.
    pub fn at(&self, flat: usize) -> f64 {
        self.data[flat]
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let to_len = check_shape(&shape)?;
        if to_len != self.data.len() {
            return Err(TensorError::ReshapeLen {
                from: self.shape.clone(),
                from_len: self.data.len(),
                to: shape,
                to_len,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Self, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::MatmulRank {
                left: self.shape.clone(),
                right: self.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data,
        })
    }

    /// Standard matrix product of two rank-2 tensors.
    ///
    /// Accumulates over the inner dimension in increasing index order, so the
    /// result is bit-identical to a naive dot-product evaluation.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Self, TensorError> {
        if self.rank() != 2 || rhs.rank() != 2 {
            return Err(TensorError::MatmulRank {
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                let row = &rhs.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Applies `f` to every element.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of all elements using Neumaier-compensated accumulation.
    pub fn sum(&self) -> f64 {
        compensated_sum(&self.data)
    }

    /// Largest element value.
    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest element value.
    pub fn min_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Flat index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Self, TensorError> {
        elementwise(BinaryOp::Add, self, Operand::Tensor(rhs))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Self, TensorError> {
        elementwise(BinaryOp::Sub, self, Operand::Tensor(rhs))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Self, TensorError> {
        elementwise(BinaryOp::Mul, self, Operand::Tensor(rhs))
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// True when every element is a finite number.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "shape must be non-empty".into(),
        });
    }
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "every dimension must be at least 1".into(),
        });
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows usize".into(),
        })
}

/// Elementwise binary op over equal-shaped tensors or tensor-vs-scalar.
///
/// Division by an exactly zero element is an error unless the caller opted
/// into IEEE semantics via [`div_ieee`].
pub fn elementwise(op: BinaryOp, a: &Tensor, b: Operand) -> Result<Tensor, TensorError> {
    match b {
        Operand::Tensor(b) => {
            if a.shape != b.shape {
                return Err(TensorError::ShapeMismatch {
                    op: op_name(op),
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            if op == BinaryOp::Div {
                if let Some(index) = b.data.iter().position(|&v| v == 0.0) {
                    return Err(TensorError::ZeroDivisor { index });
                }
            }
            let data = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| apply(op, x, y))
                .collect();
            Ok(Tensor {
                shape: a.shape.clone(),
                data,
            })
        }
        Operand::Scalar(s) => {
            if op == BinaryOp::Div && s == 0.0 {
                return Err(TensorError::ZeroDivisor { index: 0 });
            }
            Ok(a.map(|x| apply(op, x, s)))
        }
    }
}

/// Elementwise division with IEEE-754 semantics (`x / 0` yields ±inf or NaN).
pub fn div_ieee(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op: "div",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x / y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

fn op_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
        BinaryOp::Max => "max",
    }
}

fn apply(op: BinaryOp, x: f64, y: f64) -> f64 {
    match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
        BinaryOp::Max => x.max(y),
    }
}

/// Neumaier-compensated summation over a slice.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
