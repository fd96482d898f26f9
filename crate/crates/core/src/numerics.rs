//! Dense row-major `f64` kernels: matrix products, row softmax and
//! scaled-dot-product attention, plus the seeded generator every experiment
//! draws from.
//!
//! There is no broadcasting. Every shape coercion is an explicit call.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand_core::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{shape_err, Error, Result};

/// A dense `rows × cols` matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            );
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return shape_err("Matrix::new", format!("non-finite entry at flat index {pos}"));
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return shape_err(
                    "Matrix::from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                );
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return shape_err(
                "matmul",
                format!("{:?} · {:?}", self.shape(), other.shape()),
            );
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return shape_err(
                "matmul_t",
                format!("{:?} · {:?}ᵀ", self.shape(), other.shape()),
            );
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return shape_err(
                "t_matmul",
                format!("{:?}ᵀ · {:?}", self.shape(), other.shape()),
            );
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// In-place `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err("axpy", format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entrywise difference; `f64::INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Stacks `top` over `bottom`.
    pub fn vstack(top: &Matrix, bottom: &Matrix) -> Result<Matrix> {
        if top.cols != bottom.cols {
            return shape_err("vstack", format!("{:?} over {:?}", top.shape(), bottom.shape()));
        }
        let mut data = top.data.clone();
        data.extend_from_slice(&bottom.data);
        Ok(Matrix {
            rows: top.rows + bottom.rows,
            cols: top.cols,
            data,
        })
    }

    /// Places `left` and `right` side by side.
    pub fn hstack(left: &Matrix, right: &Matrix) -> Result<Matrix> {
        if left.rows != right.rows {
            return shape_err("hstack", format!("{:?} beside {:?}", left.shape(), right.shape()));
        }
        let cols = left.cols + right.cols;
        let mut data = Vec::with_capacity(left.rows * cols);
        for r in 0..left.rows {
            data.extend_from_slice(left.row(r));
            data.extend_from_slice(right.row(r));
        }
        Ok(Matrix {
            rows: left.rows,
            cols,
            data,
        })
    }

    /// Copies out rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return shape_err("slice_rows", format!("{start}..{end} of {} rows", self.rows));
        }
        Ok(Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Gathers the listed rows in order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return shape_err("select_rows", format!("row {i} of {}", self.rows));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which query/key pairs may interact. `true` means the pair is allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl KeyMask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Self { rows, cols, allowed }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    /// Entrywise AND of two masks of equal shape.
    pub fn and(&self, other: &KeyMask) -> Result<KeyMask> {
        if self.shape() != other.shape() {
            return shape_err("KeyMask::and", format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(KeyMask {
            rows: self.rows,
            cols: self.cols,
            allowed: self
                .allowed
                .iter()
                .zip(&other.allowed)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }
}

/// Numerically stable softmax of each row (max-subtracted).
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return;
    }
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Softmax restricted to allowed entries; masked entries get weight 0.
/// A row with no allowed entry comes out all zeros.
pub fn softmax_rows_masked(m: &Matrix, mask: &KeyMask) -> Result<Matrix> {
    if m.shape() != mask.shape() {
        return shape_err("softmax_rows_masked", format!("{:?} vs mask {:?}", m.shape(), mask.shape()));
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let src = m.row(r);
        let max = (0..m.cols)
            .filter(|&c| mask.get(r, c))
            .map(|c| src[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            continue;
        }
        let dst = out.row_mut(r);
        let mut total = 0.0;
        for c in 0..m.cols {
            if mask.get(r, c) {
                dst[c] = (src[c] - max).exp();
                total += dst[c];
            }
        }
        for v in dst.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// `weights = softmax(q·kᵀ/√d)`, `out = weights·v`.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, Matrix)> {
    if k.rows != v.rows {
        return shape_err("scaled_dot_attention", format!("k {:?} vs v {:?}", k.shape(), v.shape()));
    }
    let logits = q.matmul_t(k)?.scale(1.0 / (q.cols as f64).sqrt());
    let weights = softmax_rows(&logits);
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

/// Masked variant of [`scaled_dot_attention`].
pub fn masked_attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: &KeyMask) -> Result<(Matrix, Matrix)> {
    if k.rows != v.rows {
        return shape_err("masked_attention", format!("k {:?} vs v {:?}", k.shape(), v.shape()));
    }
    let logits = q.matmul_t(k)?.scale(1.0 / (q.cols as f64).sqrt());
    let weights = softmax_rows_masked(&logits, mask)?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

/// Seeded xoshiro256** generator, state expanded from the seed with splitmix64.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw (Box–Muller, one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| std * self.normal())
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform_range(lo, hi))
    }

    /// Derives an independent child generator; used to give each worker its own stream.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}

impl From<Matrix> for Vec<f64> {
    fn from(m: Matrix) -> Self {
        m.data
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}
