//! Dense row-major matrices and the handful of reductions everything else
//! is built on.
//!
//! Every sum runs left-to-right in index order, starting from `0.0`, so the
//! same inputs always produce the same bits.

use crate::error::{check_dim, Error, Result};

/// Row-major `rows x cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("Matrix::new (rows*cols)", rows * cols, data.len())?;
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
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_dim("Matrix::from_rows (row length)", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }
}

/// `m · v`, summing over columns left to right.
pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    check_dim("matvec", m.cols(), v.len())?;
    Ok((0..m.rows())
        .map(|i| {
            let mut acc = 0.0;
            for (a, b) in m.row(i).iter().zip(v) {
                acc += a * b;
            }
            acc
        })
        .collect())
}

/// `a · b`; the inner index is summed in increasing order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_dim("matmul (inner)", a.cols(), b.rows())?;
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &av) in arow.iter().enumerate() {
                acc += av * b.get(k, j);
            }
            *o = acc;
        }
    }
    Ok(out)
}

/// `out[i][j] = w[i][j] * h[i]`: the per-row broadcast of `h` across `w`.
pub fn hadamard_broadcast(w: &Matrix, h: &[f64]) -> Result<Matrix> {
    check_dim("hadamard_broadcast", w.rows(), h.len())?;
    let mut out = w.clone();
    for (i, &hi) in h.iter().enumerate() {
        for v in out.row_mut(i) {
            *v *= hi;
        }
    }
    Ok(out)
}

/// Max-shifted `log(sum(exp(v)))`.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyInput("logsumexp"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("logsumexp input".into()));
    }
    let mut acc = 0.0;
    for &x in v {
        acc += (x - max).exp();
    }
    Ok(max + acc.ln())
}

/// 1-based rank `clamp(ceil(fraction * n), 1, n)`.
///
/// A relative slack of 1e-12 absorbs representation error in `fraction`
/// (e.g. `0.7 * 10` landing a hair above 7).
pub fn nearest_rank(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = (x - x.abs() * 1e-12).ceil();
    if r < 1.0 {
        1
    } else {
        (r as usize).min(n)
    }
}

/// Value at nearest rank `ceil(rho/100 * n)` counting down from the largest.
///
/// `rho` is a percentage in `(0, 100]`; `rho = 100` returns the minimum.
pub fn top_percentile(values: &[f64], rho: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("top_percentile"));
    }
    if !(rho > 0.0 && rho <= 100.0) {
        return Err(Error::out_of_range(
            "rho",
            format!("{rho} not in (0, 100]"),
        ));
    }
    let rank = nearest_rank(rho / 100.0, values.len());
    let mut scratch = values.to_vec();
    let (_, v, _) = scratch.select_nth_unstable_by(rank - 1, |a, b| b.total_cmp(a));
    Ok(*v)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
