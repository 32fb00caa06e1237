//! Dense row-major f64 tensors (scalars, vectors, matrices).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A dense array of f64 values with an explicit shape.
///
/// Rank 0 is a scalar, rank 1 a vector, rank 2 a row-major matrix. All
/// arithmetic in the crate runs through this type in 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::matrix(r, c, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![1.0; n] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn identity(d: usize) -> Self {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data[i * d + i] = 1.0;
        }
        t
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

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// New matrix from the given row indices, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), c, data)
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        Tensor { shape, data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transposed(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn require_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// C = A @ B for matrices, or A @ v when `b` is a vector.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape.len(), b.shape.len()) {
        (2, 2) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(Error::Shape { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
            }
            let mut out = vec![0.0; m * n];
            // i-k-j order keeps the inner loop contiguous on both B and C.
            for i in 0..m {
                let arow = &a.data[i * k..(i + 1) * k];
                let crow = &mut out[i * n..(i + 1) * n];
                for (kk, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b.data[kk * n..(kk + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
            Ok(Tensor::matrix(m, n, out))
        }
        (2, 1) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            if k != b.shape[0] {
                return Err(Error::Shape { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
            }
            let mut out = vec![0.0; m];
            for i in 0..m {
                let arow = &a.data[i * k..(i + 1) * k];
                out[i] = arow.iter().zip(&b.data).map(|(x, y)| x * y).sum();
            }
            Ok(Tensor::vector(out))
        }
        (1, 2) => {
            let k = a.shape[0];
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(Error::Shape { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
            }
            let mut out = vec![0.0; n];
            for (kk, &av) in a.data.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[kk * n..(kk + 1) * n];
                for (o, &bv) in out.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
            Ok(Tensor::vector(out))
        }
        _ => Err(Error::Shape { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() }),
    }
}

/// A^p by repeated multiplication (p >= 0).
pub fn matrix_power(a: &Tensor, p: usize) -> Result<Tensor> {
    if a.shape.len() != 2 || a.shape[0] != a.shape[1] {
        return Err(Error::Shape { op: "matrix_power", lhs: a.shape.clone(), rhs: a.shape.clone() });
    }
    let d = a.shape[0];
    let mut acc = Tensor::identity(d);
    for _ in 0..p {
        acc = matmul(&acc, a)?;
    }
    Ok(acc)
}

pub fn trace(a: &Tensor) -> f64 {
    let d = a.rows();
    (0..d).map(|i| a.at(i, i)).sum()
}
