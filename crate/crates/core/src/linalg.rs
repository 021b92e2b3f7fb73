//! Minimal dense/sparse matrix types used by the GCN engine.
//!
//! Everything is row-major `f64`. The sparse type is plain CSR; it backs both
//! the propagation operator and the pre-propagated feature matrix.

use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Whether the running CPU has AVX2 and FMA.
#[cfg(target_arch = "x86_64")]
#[inline]
pub(crate) fn fma_available() -> bool {
    std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
}

/// `a * b + c`, fused when `FMA` is set.
#[inline(always)]
pub(crate) fn madd<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

#[inline(always)]
fn axpy_with<const FMA: bool>(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = madd::<FMA>(a, xi, *yi);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn axpy_fma(a: f64, x: &[f64], y: &mut [f64]) {
    axpy_with::<true>(a, x, y);
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if y.len() >= 16 && fma_available() {
        // SAFETY: the CPU supports AVX2 and FMA
        unsafe { axpy_fma(a, x, y) };
        return;
    }
    axpy_with::<false>(a, x, y);
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from raw CSR arrays. Column indices within a row must be sorted.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        assert_eq!(indptr.len(), rows + 1);
        assert_eq!(indices.len(), values.len());
        assert_eq!(*indptr.last().unwrap(), indices.len());
        debug_assert!(indices.iter().all(|&c| c < cols));
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    /// Sparse copy of a dense matrix, dropping exact zeros.
    pub fn from_dense(m: &Matrix) -> Self {
        let mut indptr = Vec::with_capacity(m.rows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..m.rows() {
            for (c, &v) in m.row(r).iter().enumerate() {
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self::from_parts(m.rows(), m.cols(), indptr, indices, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    /// Entry lookup by binary search; zero when absent.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        match idx.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                m.set(r, c, v);
            }
        }
        m
    }

    /// `self * dense`; empty rows stay zero.
    pub fn mul_dense(&self, dense: &Matrix) -> Matrix {
        assert_eq!(self.cols, dense.rows(), "spmm dimension mismatch");
        let mut out = Matrix::zeros(self.rows, dense.cols());
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            if idx.is_empty() {
                continue;
            }
            let orow = out.row_mut(r);
            for (&c, &v) in idx.iter().zip(vals) {
                axpy(v, dense.row(c), orow);
            }
        }
        out
    }

    /// `selfᵀ * dense`.
    pub fn tmul_dense(&self, dense: &Matrix) -> Matrix {
        assert_eq!(self.rows, dense.rows(), "spmm^T dimension mismatch");
        let mut out = Matrix::zeros(self.cols, dense.cols());
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            let drow = dense.row(r);
            if idx.is_empty() || drow.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (&c, &v) in idx.iter().zip(vals) {
                axpy(v, drow, out.row_mut(c));
            }
        }
        out
    }

    /// `self * other` for the rows selected by `want` (other rows left empty).
    ///
    /// Output rows keep sorted column order and exact zeros are dropped.
    pub fn mul_sparse_rows(&self, other: &CsrMatrix, want: &[bool]) -> CsrMatrix {
        assert_eq!(self.cols, other.rows, "spgemm dimension mismatch");
        assert_eq!(want.len(), self.rows);
        let mut acc = vec![0.0; other.cols];
        let mut touched = vec![false; other.cols];
        let mut cols_hit: Vec<usize> = Vec::new();
        let mut indptr = Vec::with_capacity(self.rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..self.rows {
            if want[r] {
                let (idx, vals) = self.row(r);
                for (&k, &a) in idx.iter().zip(vals) {
                    let (oidx, ovals) = other.row(k);
                    for (&c, &b) in oidx.iter().zip(ovals) {
                        if !touched[c] {
                            touched[c] = true;
                            cols_hit.push(c);
                        }
                        acc[c] += a * b;
                    }
                }
                cols_hit.sort_unstable();
                for &c in &cols_hit {
                    let v = acc[c];
                    if v != 0.0 {
                        indices.push(c);
                        values.push(v);
                    }
                    acc[c] = 0.0;
                    touched[c] = false;
                }
                cols_hit.clear();
            }
            indptr.push(indices.len());
        }
        CsrMatrix::from_parts(self.rows, other.cols, indptr, indices, values)
    }
}
