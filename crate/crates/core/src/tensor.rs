//! Dense row-major tensors of `f64`.
//!
//! Only what the network needs: construction with validation, row access and
//! a handful of matrix kernels. Every constructor rejects non-finite values.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtaError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = TtaError;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.values)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TtaError::Shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TtaError::NonFinite("tensor construction"));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![0.0; n] }
    }

    /// Builds a `rows × cols` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TtaError::Shape("ragged rows".into()));
        }
        let values = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn require_matrix(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(TtaError::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Number of rows; panics if the tensor is not a matrix.
    pub fn rows(&self) -> usize {
        self.require_matrix().expect("rows() on non-matrix").0
    }

    /// Number of columns; panics if the tensor is not a matrix.
    pub fn cols(&self) -> usize {
        self.require_matrix().expect("cols() on non-matrix").1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.values[i * c..(i + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.cols().max(1))
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.require_matrix()?;
        if start > end || end > r {
            return Err(TtaError::Shape(format!("row range {start}..{end} out of {r}")));
        }
        Ok(Self { shape: vec![end - start, c], values: self.values[start * c..end * c].to_vec() })
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = self.require_matrix()?;
        let mut values = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TtaError::Shape(format!("row {i} out of {r}")));
            }
            values.extend_from_slice(&self.values[i * c..(i + 1) * c]);
        }
        Ok(Self { shape: vec![idx.len(), c], values })
    }

    /// `self · rhs` for `self: n×k`, `rhs: k×m`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, k) = self.require_matrix()?;
        let (k2, m) = rhs.require_matrix()?;
        if k != k2 {
            return Err(TtaError::Shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.values[i * k..(i + 1) * k];
            let o = &mut out[i * m..(i + 1) * m];
            for (p, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b = &rhs.values[p * m..(p + 1) * m];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Ok(Tensor { shape: vec![n, m], values: out })
    }

    /// `self · rhsᵀ` for `self: n×m`, `rhs: k×m`.
    pub fn matmul_transposed(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, m) = self.require_matrix()?;
        let (k, m2) = rhs.require_matrix()?;
        if m != m2 {
            return Err(TtaError::Shape(format!("matmul {n}x{m} by ({k}x{m2})^T")));
        }
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let a = &self.values[i * m..(i + 1) * m];
            for j in 0..k {
                let b = &rhs.values[j * m..(j + 1) * m];
                out[i * k + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Ok(Tensor { shape: vec![n, k], values: out })
    }

    /// `selfᵀ · rhs` for `self: n×k`, `rhs: n×m`.
    pub fn transposed_matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, k) = self.require_matrix()?;
        let (n2, m) = rhs.require_matrix()?;
        if n != n2 {
            return Err(TtaError::Shape(format!("({n}x{k})^T by {n2}x{m}")));
        }
        let mut out = vec![0.0; k * m];
        for r in 0..n {
            let a = &self.values[r * k..(r + 1) * k];
            let b = &rhs.values[r * m..(r + 1) * m];
            for (p, &av) in a.iter().enumerate() {
                let o = &mut out[p * m..(p + 1) * m];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Ok(Tensor { shape: vec![k, m], values: out })
    }

    /// Per-column mean of a matrix.
    pub fn column_means(&self) -> Result<Vec<f64>> {
        let (r, c) = self.require_matrix()?;
        if r == 0 {
            return Err(TtaError::Shape("column mean of empty matrix".into()));
        }
        let mut acc = vec![0.0; c];
        for row in self.values.chunks(c) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = r as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Stacks matrices with equal column counts vertically.
pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts.first().map(|t| t.cols()).unwrap_or(0);
    let mut values = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(TtaError::Shape("vstack column mismatch".into()));
        }
        rows += p.rows();
        values.extend_from_slice(p.values());
    }
    Ok(Tensor { shape: vec![rows, cols], values })
}
