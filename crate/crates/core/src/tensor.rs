//! Dense f32 matrix kernel with a pinned reduction order.
//!
//! Every reduction (matmul inner dimension, softmax row sums, layer-norm
//! moments) accumulates in f64 over ascending indices and rounds to f32
//! once at store. Transcendentals come from the pure-Rust `libm` port, not
//! the platform libm. Together these make every kernel output bit-identical
//! across runs and platforms, which the rest of the crate relies on.

use crate::error::{Error, Result};

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
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

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("rows have unequal lengths".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
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

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copy of columns `[start, start+len)`, keeping all rows.
    pub fn col_block(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.cols {
            return Err(Error::Shape(format!(
                "column block {start}..{} exceeds {} columns",
                start + len,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Matrix::new(self.rows, len, data)
    }

    /// Horizontal concatenation; all parts must share the row count.
    pub fn hconcat(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(Error::Shape("hconcat: row counts differ".into()));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Matrix::new(rows, cols, data)
    }

    /// Elementwise sum (plain f32 adds; shapes must match).
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "add: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a · b` with f64 accumulation over the inner dimension in ascending index
/// order, rounded to f32 once per output element. The i-k-j loop keeps that
/// order per output element while letting the inner loop vectorize; the
/// 4-way k unroll only batches accumulator loads, the per-element add
/// sequence is unchanged.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} × {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let cols = b.cols;
    let mut data = Vec::with_capacity(a.rows * cols);
    let mut acc = vec![0.0f64; cols];
    for i in 0..a.rows {
        acc.fill(0.0);
        let a_row = a.row(i);
        let mut k = 0;
        while k + 4 <= a.cols {
            let a0 = a_row[k] as f64;
            let a1 = a_row[k + 1] as f64;
            let a2 = a_row[k + 2] as f64;
            let a3 = a_row[k + 3] as f64;
            let b0 = b.row(k);
            let b1 = b.row(k + 1);
            let b2 = b.row(k + 2);
            let b3 = b.row(k + 3);
            for (c, (((&x0, &x1), &x2), &x3)) in acc
                .iter_mut()
                .zip(b0.iter().zip(b1).zip(b2).zip(b3))
            {
                let mut v = *c;
                v += a0 * x0 as f64;
                v += a1 * x1 as f64;
                v += a2 * x2 as f64;
                v += a3 * x3 as f64;
                *c = v;
            }
            k += 4;
        }
        while k < a.cols {
            let aik = a_row[k] as f64;
            for (c, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *c += aik * bkj as f64;
            }
            k += 1;
        }
        data.extend(acc.iter().map(|&v| v as f32));
    }
    Matrix::new(a.rows, cols, data)
}

/// `a · bᵀ` as ascending-index dot products. Bit-identical to
/// `matmul(a, &b.transposed())` because each output element accumulates the
/// same f64 terms in the same order.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_nt: {}x{} × ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut data = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            data.push(dot_f64(a_row, b.row(j)) as f32);
        }
    }
    Matrix::new(a.rows, b.rows, data)
}

/// Ascending-index f64 dot product of two equal-length f32 slices.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x as f64 * y as f64;
    }
    acc
}

/// Row-wise softmax of `m * scale`, stabilized by subtracting the row maximum
/// of the scaled logits before exponentiation. Each output row is
/// non-negative and sums to 1 within f32 rounding.
pub fn softmax_rows(m: &Matrix, scale: f64) -> Matrix {
    let mut out = Matrix::zeros(m.rows, m.cols);
    let mut scaled = vec![0.0f64; m.cols];
    for r in 0..m.rows {
        for (s, &v) in scaled.iter_mut().zip(m.row(r)) {
            *s = v as f64 * scale;
        }
        softmax_slice(&scaled, out.row_mut(r));
    }
    out
}

/// Softmax of one logit row (already scaled), f64 throughout, f32 at store.
pub(crate) fn softmax_slice(logits: &[f64], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    let mut exps = vec![0.0f64; logits.len()];
    for (e, &l) in exps.iter_mut().zip(logits) {
        *e = libm::exp(l - max);
        sum += *e;
    }
    for (o, &e) in out.iter_mut().zip(&exps) {
        *o = (e / sum) as f32;
    }
}

/// Layer normalization of one vector: zero-mean, unit-variance (population
/// variance, f64 moments), then `gamma`-scale and `beta`-shift.
pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::Shape(format!(
            "layer_norm: x[{}], gamma[{}], beta[{}]",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Validation(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let n = x.len() as f64;
    let mut mean = 0.0f64;
    for &v in x {
        mean += v as f64;
    }
    mean /= n;
    let mut var = 0.0f64;
    for &v in x {
        let d = v as f64 - mean;
        var += d * d;
    }
    var /= n;
    let inv = 1.0 / (var + eps as f64).sqrt();
    Ok(x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| (((v as f64 - mean) * inv) * g as f64 + b as f64) as f32)
        .collect())
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::tanh(SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)))) as f32
}
