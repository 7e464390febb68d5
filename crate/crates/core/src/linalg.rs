//! Dense row-major matrices and the handful of kernels the attention stack
//! is built from: matmul, causal softmax, scaled scores and RMS normalization.
//!
//! Everything is `f64`. Backward kernels for softmax and RMS normalization
//! live next to their forward counterparts so the two stay in sync.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization floor shared by every RMS norm in the model.
pub const NORM_EPS: f64 = 1e-6;

/// Dense 2-D real array stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from row-major data. Rejects length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("from_vec", (rows, cols), (1, data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("from_vec"));
        }
        Ok(Tensor2D { rows, cols, data })
    }

    /// Builds a tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", (rows.len(), cols), (1, bad.len())));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Tensor2D {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor2D) -> Result<Tensor2D> {
        let mut out = self.clone();
        out.add_scaled(other, 1.0)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Tensor2D) -> Result<Tensor2D> {
        let mut out = self.clone();
        out.add_scaled(other, -1.0)?;
        Ok(out)
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Tensor2D, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Copies columns `[start, end)` into a new tensor.
    pub fn col_block(&self, start: usize, end: usize) -> Tensor2D {
        let width = end - start;
        let mut out = Tensor2D::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i)
                .copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_col_block(&mut self, start: usize, block: &Tensor2D) {
        debug_assert_eq!(block.rows, self.rows);
        for i in 0..self.rows {
            let w = block.cols;
            self.row_mut(i)[start..start + w].copy_from_slice(block.row(i));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest elementwise absolute difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor2D) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Decoder-style mask: query `i` may attend to key `j` iff `j <= i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CausalMask {
    pub seq_len: usize,
}

impl CausalMask {
    pub fn new(seq_len: usize) -> Self {
        CausalMask { seq_len }
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        j <= i
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor2D::zeros(n, m);
    for i in 0..n {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor2D::zeros(n, m);
    for p in 0..k {
        let a_row = &a.data[p * n..(p + 1) * n];
        let b_row = &b.data[p * m..(p + 1) * m];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = Tensor2D::zeros(n, m);
    for i in 0..n {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b.data[j * k..(j + 1) * k];
            out.data[i * m + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

/// Row softmax restricted to the causal prefix of each row.
///
/// Masked entries are exactly zero. The row max over allowed positions is
/// subtracted before exponentiation.
pub fn masked_row_softmax(scores: &Tensor2D, mask: CausalMask) -> Result<Tensor2D> {
    if scores.rows != scores.cols || scores.rows != mask.seq_len {
        return Err(Error::shape(
            "masked_row_softmax",
            scores.shape(),
            (mask.seq_len, mask.seq_len),
        ));
    }
    let n = scores.rows;
    let mut out = Tensor2D::zeros(n, n);
    for i in 0..n {
        let row = scores.row(i);
        let allowed = (0..n).filter(|&j| mask.allowed(i, j));
        let max = allowed.clone().map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in allowed.clone() {
            let e = (row[j] - max).exp();
            out.data[i * n + j] = e;
            total += e;
        }
        for j in allowed {
            out.data[i * n + j] /= total;
        }
    }
    Ok(out)
}

/// Gradient of a row softmax with respect to its scores, given the softmax
/// output `probs` and the upstream gradient. Masked entries (probability
/// exactly zero) receive zero gradient.
pub fn masked_row_softmax_backward(probs: &Tensor2D, grad_out: &Tensor2D) -> Tensor2D {
    let (n, m) = probs.shape();
    let mut out = Tensor2D::zeros(n, m);
    for i in 0..n {
        let p = probs.row(i);
        let g = grad_out.row(i);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = p[j] * (g[j] - dot);
        }
    }
    out
}

/// `q · kᵀ / sqrt(scale_dim)`.
pub fn scaled_scores(q: &Tensor2D, k: &Tensor2D, scale_dim: usize) -> Result<Tensor2D> {
    if scale_dim == 0 {
        return Err(Error::Config("scaled_scores: scale_dim must be positive".into()));
    }
    let mut s = matmul_nt(q, k)?;
    let inv = 1.0 / (scale_dim as f64).sqrt();
    s.data.iter_mut().for_each(|v| *v *= inv);
    Ok(s)
}

/// Scales each row to unit root-mean-square, then multiplies by `gain`.
///
/// The row RMS is floored at `eps`, so all-zero rows stay zero.
pub fn per_head_rmsnorm(x: &Tensor2D, gain: &[f64], eps: f64) -> Result<Tensor2D> {
    if gain.len() != x.cols {
        return Err(Error::shape("per_head_rmsnorm", x.shape(), (1, gain.len())));
    }
    let mut out = x.clone();
    for i in 0..x.rows {
        let r = row_rms(x.row(i)).max(eps);
        for (o, g) in out.row_mut(i).iter_mut().zip(gain) {
            *o = *o / r * g;
        }
    }
    Ok(out)
}

pub(crate) fn row_rms(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64).sqrt()
}

/// Backward of [`per_head_rmsnorm`]: returns `(d_x, d_gain)`.
pub fn rmsnorm_backward(
    x: &Tensor2D,
    gain: &[f64],
    eps: f64,
    grad_out: &Tensor2D,
) -> (Tensor2D, Vec<f64>) {
    let d = x.cols;
    let mut dx = Tensor2D::zeros(x.rows, d);
    let mut dgain = vec![0.0; d];
    for i in 0..x.rows {
        let row = x.row(i);
        let rms = row_rms(row);
        let r = rms.max(eps);
        let g = grad_out.row(i);
        let dn: Vec<f64> = g.iter().zip(gain).map(|(a, b)| a * b).collect();
        for j in 0..d {
            dgain[j] += g[j] * row[j] / r;
        }
        let out = dx.row_mut(i);
        if rms > eps {
            let proj: f64 = dn.iter().zip(row).map(|(a, b)| a * b / r).sum::<f64>() / d as f64;
            for j in 0..d {
                out[j] = (dn[j] - row[j] / r * proj) / r;
            }
        } else {
            for j in 0..d {
                out[j] = dn[j] / r;
            }
        }
    }
    (dx, dgain)
}
