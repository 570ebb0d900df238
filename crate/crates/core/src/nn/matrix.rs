use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dense row-major `rows × cols` matrix of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("FeatureMatrix::new", &[rows, cols], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature matrix has a non-finite entry"));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    /// Skips the finiteness scan; for buffers produced by the kernels.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        FeatureMatrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("FeatureMatrix::from_rows", &[cols], &[bad.len()]));
        }
        FeatureMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row_iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.cols.max(1))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", &self.shape(), &other.shape()));
        }
        Ok(matmul_raw(&self.data, self.rows, self.cols, &other.data, other.cols))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_t", &self.shape(), &other.shape()));
        }
        let n = other.rows;
        let mut out = vec![0.0; self.rows * n];
        if n > 0 {
            out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
                let a = self.row(i);
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = dot(a, other.row(j));
                }
            });
        }
        Ok(FeatureMatrix::from_raw(self.rows, n, out))
    }

    pub fn add(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add", &self.shape(), &other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(FeatureMatrix::from_raw(self.rows, self.cols, data))
    }

    /// Adds `v` to every row.
    pub fn add_row(&self, v: &[f64]) -> Result<FeatureMatrix> {
        if v.len() != self.cols {
            return Err(Error::shape("add_row", &self.shape(), &[v.len()]));
        }
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.cols.max(1)) {
            for (x, b) in row.iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(FeatureMatrix::from_raw(self.rows, self.cols, data))
    }

    /// Horizontal concatenation `[self ‖ other]`.
    pub fn hcat(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.rows != other.rows {
            return Err(Error::shape("hcat", &self.shape(), &other.shape()));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(FeatureMatrix::from_raw(self.rows, cols, data))
    }

    /// `n` copies of the row vector `v`.
    pub fn broadcast(v: &[f64], n: usize) -> FeatureMatrix {
        let mut data = Vec::with_capacity(v.len() * n);
        for _ in 0..n {
            data.extend_from_slice(v);
        }
        FeatureMatrix::from_raw(n, v.len(), data)
    }

    /// Column-wise maximum over all rows.
    pub fn max_pool(&self) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.cols];
        for row in self.row_iter() {
            for (o, v) in out.iter_mut().zip(row) {
                if *v > *o {
                    *o = *v;
                }
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMatrix {
        FeatureMatrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn relu(&self) -> FeatureMatrix {
        self.map(|v| v.max(0.0))
    }

    pub fn scale(&self, s: f64) -> FeatureMatrix {
        self.map(|v| v * s)
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix::from_raw(idx.len(), self.cols, data)
    }

    /// Reinterprets the buffer with a new row width; `rows · cols` must be
    /// preserved.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<FeatureMatrix> {
        if rows * cols != self.data.len() {
            return Err(Error::shape("reshape", &self.shape(), &[rows, cols]));
        }
        Ok(FeatureMatrix::from_raw(rows, cols, self.data))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-parallel `a (n×k) · b (k×m)`. Each output row is accumulated in
/// a fixed order, so results do not depend on the thread count.
pub(crate) fn matmul_raw(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> FeatureMatrix {
    let mut out = vec![0.0; n * m];
    if m > 0 && k > 0 {
        out.par_chunks_mut(m).enumerate().for_each(|(i, orow)| {
            let arow = &a[i * k..(i + 1) * k];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[kk * m..(kk + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        });
    }
    FeatureMatrix::from_raw(n, m, out)
}
