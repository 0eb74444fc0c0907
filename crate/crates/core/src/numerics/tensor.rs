use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`. Graph operations use the 2-D view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", values.len()),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            values: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            values: vec![value; rows * cols],
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn column(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len(), 1],
            values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            values: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scaled(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `a (m x k) * b (k x n)`; zero entries of `a` are skipped, which keeps
/// one-hot inputs cheap.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &x) in a.row(i).iter().enumerate().take(k) {
            if x == 0.0 {
                continue;
            }
            for (o, &y) in orow.iter_mut().zip(b.row(p)) {
                *o += x * y;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        values: out,
    }
}

/// `a^T (k x m) * b (m x n)` without materialising the transpose.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = b.row(i);
        for (p, &x) in a.row(i).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Tensor {
        shape: vec![k, n],
        values: out,
    }
}

/// `a (m x n) * b^T` where `b` is `k x n`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), b.rows());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..k {
            out[i * k + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    Tensor {
        shape: vec![m, k],
        values: out,
    }
}
