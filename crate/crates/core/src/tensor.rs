//! Dense numerical substrate: row-major f32 matrices plus the handful of
//! kernels the transformer and the similarity analysis need.
//!
//! Storage is 32-bit; every reduction (dot products, norms, means) runs in a
//! 64-bit accumulator with a fixed traversal order, so results are bitwise
//! reproducible across runs and safe under concurrent read-only use.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("inner dimensions do not agree: {m}x{k} * {k2}x{n}")]
    InnerDimMismatch {
        m: usize,
        k: usize,
        k2: usize,
        n: usize,
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadDataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("degenerate vector: norm below 1e-12")]
    DegenerateVector,
    #[error("vector lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
}

/// Row-major dense matrix of f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::BadDataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::ShapeMismatch {
                    expected: format!("row of length {c}"),
                    found: format!("row of length {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// True when both matrices have identical shape and bit-identical data.
    pub fn bitwise_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Matrix product. Accumulation order is fixed: for each output row the
    /// inner index k ascends, summing into an f64 row buffer, so repeated
    /// calls produce bit-identical results.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::InnerDimMismatch {
                m: self.rows,
                k: self.cols,
                k2: other.rows,
                n: other.cols,
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0f32; m * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for p in 0..k {
                let a_ip = self.data[i * k + p] as f64;
                let brow = &other.data[p * n..(p + 1) * n];
                for (j, b) in brow.iter().enumerate() {
                    acc[j] += a_ip * (*b as f64);
                }
            }
            for j in 0..n {
                out[i * n + j] = acc[j] as f32;
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// Frobenius inner product Σ aᵢⱼ bᵢⱼ, accumulated in f64 in flat index order.
    pub fn frobenius_inner(&self, other: &Matrix) -> Result<f64, TensorError> {
        self.check_same_shape(other)?;
        let mut acc = 0.0f64;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            acc += (*a as f64) * (*b as f64);
        }
        Ok(acc)
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for a in &self.data {
            acc += (*a as f64) * (*a as f64);
        }
        acc.sqrt()
    }

    /// Row-wise softmax with max-subtraction. Each row must contain at least
    /// one finite entry (rows of a causal attention mask always keep the
    /// diagonal unmasked); an all-`-inf` row is a programming error.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            assert!(max.is_finite(), "softmax row {r} has no finite entry");
            let mut sum = 0.0f64;
            for v in row.iter_mut() {
                let e = ((*v - max) as f64).exp();
                *v = e as f32;
                sum += e;
            }
            for v in row.iter_mut() {
                *v = ((*v as f64) / sum) as f32;
            }
        }
        out
    }

    /// Gathers the given columns (in the given order) into a new matrix.
    pub fn select_cols(&self, cols: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, cols.len());
        for r in 0..self.rows {
            for (j, &c) in cols.iter().enumerate() {
                out.data[r * cols.len() + j] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Gathers the given rows (in the given order) into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), self.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.data[i * self.cols..(i + 1) * self.cols]
                .copy_from_slice(&self.data[r * self.cols..(r + 1) * self.cols]);
        }
        out
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn hconcat(parts: &[Matrix]) -> Result<Matrix, TensorError> {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            if p.rows != rows {
                return Err(TensorError::ShapeMismatch {
                    expected: format!("{rows} rows"),
                    found: format!("{} rows", p.rows),
                });
            }
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + p.cols].copy_from_slice(p.row(r));
            }
            offset += p.cols;
        }
        Ok(out)
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<(), TensorError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{}x{}", self.rows, self.cols),
                found: format!("{}x{}", other.rows, other.cols),
            });
        }
        Ok(())
    }
}

/// Cosine similarity of two flat vectors, clamped to [-1, 1] so downstream
/// threshold comparisons never see 1 + ε. Errors when either norm is below
/// 1e-12.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, TensorError> {
    if u.len() != v.len() {
        return Err(TensorError::LengthMismatch {
            a: u.len(),
            b: v.len(),
        });
    }
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (a, b) in u.iter().zip(v.iter()) {
        let (a, b) = (*a as f64, *b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < 1e-12 || nv < 1e-12 {
        return Err(TensorError::DegenerateVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// RMS normalization of a single row: x / sqrt(mean(x²) + eps) * gamma.
pub fn rmsnorm_row(x: &[f32], gamma: &[f32], eps: f32) -> Vec<f32> {
    debug_assert_eq!(x.len(), gamma.len());
    debug_assert!(eps > 0.0);
    let mut ms = 0.0f64;
    for v in x {
        ms += (*v as f64) * (*v as f64);
    }
    ms /= x.len() as f64;
    let inv = 1.0 / (ms + eps as f64).sqrt();
    x.iter()
        .zip(gamma.iter())
        .map(|(v, g)| ((*v as f64) * inv * (*g as f64)) as f32)
        .collect()
}

#[inline]
pub fn silu(x: f32) -> f32 {
    let xf = x as f64;
    (xf / (1.0 + (-xf).exp())) as f32
}
