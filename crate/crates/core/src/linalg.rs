//! Dense row-major matrices and the handful of vector kernels the analyses need.
//!
//! Reductions accumulate in f64; inputs and stored results stay f32.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 2-D f32 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimMismatch {
                expected: rows * cols,
                got: data.len(),
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

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
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

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copies the selected rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// Copies rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(Error::IndexOutOfRange {
                index: end,
                len: self.rows,
            });
        }
        Ok(Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn l2_norm(a: &[f32]) -> f64 {
    a.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

pub fn l1_norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| f64::from(x).abs()).sum()
}

/// Cosine similarity; `None` when either side has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// Unit-length copy of `v`; `None` for a zero vector.
pub fn normalized(v: &[f32]) -> Option<Vec<f32>> {
    let n = l2_norm(v);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

/// Arithmetic mean of rows, accumulated in f64.
pub fn mean_of_rows<'a>(
    rows: impl IntoIterator<Item = &'a [f32]>,
    dim: usize,
) -> (Vec<f64>, usize) {
    let mut acc = vec![0.0f64; dim];
    let mut count = 0usize;
    for r in rows {
        for (a, &x) in acc.iter_mut().zip(r) {
            *a += f64::from(x);
        }
        count += 1;
    }
    if count > 0 {
        for a in &mut acc {
            *a /= count as f64;
        }
    }
    (acc, count)
}

/// Relative threshold under which a mean vector counts as degenerate.
pub(crate) const DEGENERATE_EPS: f64 = 1e-7;

/// Normalizes an f64 mean vector, rejecting one whose norm is negligible next to
/// the average input norm.
pub(crate) fn normalize_mean(mean: &[f64], scale: f64) -> Result<Vec<f32>> {
    let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > DEGENERATE_EPS * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateCentroid);
    }
    Ok(mean.iter().map(|x| (x / n) as f32).collect())
}
