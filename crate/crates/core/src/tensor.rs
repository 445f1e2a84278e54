//! Dense row-major `f64` tensors with trailing-dimension broadcasting.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;

/// Failures raised by tensor construction and arithmetic.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shapes {left:?} and {right:?} do not broadcast")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("zero-sized dimension in shape {0:?}")]
    EmptyDimension(Vec<usize>),
    #[error("division by exact zero at flat index {0}")]
    DivisionByZero(usize),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("operation `{0}` needs a second operand")]
    MissingOperand(&'static str),
    #[error("axis {axis} out of range for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

/// Elementwise operation tags accepted by [`Tensor::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Log,
    Exp,
    Softplus,
    Neg,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Log => "log",
            Self::Exp => "exp",
            Self::Softplus => "softplus",
            Self::Neg => "neg",
        }
    }
}

/// `log(1 + exp(x))` without overflow for large `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + math::ln_1p(math::exp(-x))
    } else {
        math::ln_1p(math::exp(x))
    }
}

/// Logistic function, the derivative of [`softplus`].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, checking the element count and that every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::EmptyDimension(shape));
        }
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    /// Construction without the finiteness scan, for internal hot paths.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds on axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Applies a tagged elementwise operation. Binary tags require `b` and
    /// broadcast the operands; unary tags ignore it.
    pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor, TensorError> {
        let out = if op.is_binary() {
            let b = b.ok_or(TensorError::MissingOperand(op.name()))?;
            match op {
                ElementwiseOp::Add => a.zip_broadcast(b, |x, y| x + y)?,
                ElementwiseOp::Sub => a.zip_broadcast(b, |x, y| x - y)?,
                ElementwiseOp::Mul => a.zip_broadcast(b, |x, y| x * y)?,
                ElementwiseOp::Div => {
                    if let Some(i) = b.data.iter().position(|&v| v == 0.0) {
                        return Err(TensorError::DivisionByZero(i));
                    }
                    a.zip_broadcast(b, |x, y| x / y)?
                }
                _ => unreachable!(),
            }
        } else {
            match op {
                ElementwiseOp::Log => a.map(math::ln),
                ElementwiseOp::Exp => a.map(math::exp),
                ElementwiseOp::Softplus => a.map(softplus),
                ElementwiseOp::Neg => a.map(|v| -v),
                _ => unreachable!(),
            }
        };
        if let Some(i) = out.data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(out)
    }

    /// Combines two tensors elementwise under trailing-dimension broadcasting.
    pub fn zip_broadcast(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Self::from_parts(self.shape.clone(), data));
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        if other.is_scalar() && out_shape == self.shape {
            let y = other.data[0];
            return Ok(self.map(|x| f(x, y)));
        }
        if self.is_scalar() && out_shape == other.shape {
            let x = self.data[0];
            return Ok(other.map(|y| f(x, y)));
        }
        if let Some(t) = self.zip_rows(other, &out_shape, &f) {
            return Ok(t);
        }
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let n: usize = out_shape.iter().product();
        let rank = out_shape.len();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        // Innermost axis is walked in a tight loop; outer axes via an odometer.
        let inner = out_shape[rank - 1];
        let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
        let outer = n / inner;
        for _ in 0..outer {
            let (mut pa, mut pb) = (ia, ib);
            for _ in 0..inner {
                data.push(f(self.data[pa], other.data[pb]));
                pa += ia_step;
                pb += ib_step;
            }
            for ax in (0..rank - 1).rev() {
                idx[ax] += 1;
                ia += sa[ax];
                ib += sb[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                ia -= sa[ax] * out_shape[ax];
                ib -= sb[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self::from_parts(out_shape, data))
    }

    // Rank-2 `[R, N]` against `[R, 1]` or `[1, N]`, either side.
    fn zip_rows(&self, other: &Tensor, out_shape: &[usize], f: &impl Fn(f64, f64) -> f64) -> Option<Tensor> {
        let [r, n] = *out_shape else { return None };
        let (big, small, swapped) = if self.shape == out_shape {
            (self, other, false)
        } else if other.shape == out_shape {
            (other, self, true)
        } else {
            return None;
        };
        if small.rank() != 2 {
            return None;
        }
        let apply = |x: f64, y: f64| if swapped { f(y, x) } else { f(x, y) };
        let mut data = Vec::with_capacity(r * n);
        if small.shape == [r, 1] {
            for (row, &y) in big.data.chunks(n.max(1)).zip(&small.data) {
                data.extend(row.iter().map(|&x| apply(x, y)));
            }
        } else if small.shape == [1, n] {
            for row in big.data.chunks(n.max(1)) {
                data.extend(row.iter().zip(&small.data).map(|(&x, &y)| apply(x, y)));
            }
        } else {
            return None;
        }
        Some(Self::from_parts(out_shape.to_vec(), data))
    }

    /// Sums a broadcast result back down to `shape` (the adjoint of broadcasting).
    pub fn sum_to_shape(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let n: usize = shape.iter().product();
        if n == 1 {
            return Tensor::from_parts(shape.to_vec(), vec![self.sum()]);
        }
        if let [r, c] = *self.shape {
            if shape == [r, 1] {
                let data = self.data.chunks(c.max(1)).map(|row| row.iter().sum()).collect();
                return Tensor::from_parts(shape.to_vec(), data);
            }
            if shape == [1, c] {
                let mut out = vec![0.0; c];
                for row in self.data.chunks(c.max(1)) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                return Tensor::from_parts(shape.to_vec(), out);
            }
        }
        let strides = broadcast_strides(shape, &self.shape);
        let rank = self.shape.len();
        let mut out = vec![0.0; n];
        let mut idx = vec![0usize; rank];
        let mut pos = 0usize;
        for &v in &self.data {
            out[pos] += v;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                pos += strides[ax];
                if idx[ax] < self.shape[ax] {
                    break;
                }
                pos -= strides[ax] * self.shape[ax];
                idx[ax] = 0;
            }
        }
        Tensor::from_parts(shape.to_vec(), out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sums along `axis`, keeping it as a size-one dimension.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        if axis >= self.rank() {
            return Err(TensorError::BadAxis {
                axis,
                rank: self.rank(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &self.data[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in row.iter_mut().zip(&other.data[p * n..(p + 1) * n]) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::BadAxis {
                axis: 1,
                rank: self.rank(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Result shape of broadcasting `a` against `b`, aligning trailing dimensions.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    left: a.to_vec(),
                    right: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

// Strides of `shape` viewed inside `target`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let offset = target.len() - shape.len();
    let mut strides = vec![0; target.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}
