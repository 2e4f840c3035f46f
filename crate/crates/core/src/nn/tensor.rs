use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. Scalars are `1×1`, row vectors `1×n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "tensor",
                format!("{} values for a {rows}x{cols} tensor", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// Kernels. Every reduction runs in a fixed order, so results are bitwise
// reproducible for identical inputs.

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let (x, y) = (&a[c * 4..c * 4 + 4], &b[c * 4..c * 4 + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for k in chunks * 4..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x != 0.0 {
                axpy(x, &b[p * n..(p + 1) * n], out_row);
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[a×b] += x[m×a]ᵀ · y[m×b]`. Rows of `y` that are mostly zero take a
/// sparse path; both paths add contributions to each output in row order.
pub(crate) fn matmul_tn_acc(x: &[f64], y: &[f64], out: &mut [f64], m: usize, a: usize, b: usize) {
    let mut nz = Vec::new();
    for i in 0..m {
        let x_row = &x[i * a..(i + 1) * a];
        let y_row = &y[i * b..(i + 1) * b];
        nz.clear();
        nz.extend((0..b).filter(|&j| y_row[j] != 0.0));
        if nz.is_empty() {
            continue;
        }
        if nz.len() * 4 < b {
            for (p, &xv) in x_row.iter().enumerate() {
                let out_row = &mut out[p * b..(p + 1) * b];
                for &j in &nz {
                    out_row[j] += xv * y_row[j];
                }
            }
        } else {
            for (p, &xv) in x_row.iter().enumerate() {
                if xv != 0.0 {
                    axpy(xv, y_row, &mut out[p * b..(p + 1) * b]);
                }
            }
        }
    }
}

/// `out[m×k] += dy[m×n] · w[k×n]ᵀ`, skipping zero entries of sparse rows.
pub(crate) fn matmul_nt_sparse_acc(dy: &[f64], w: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut nz = Vec::new();
    for i in 0..m {
        let dy_row = &dy[i * n..(i + 1) * n];
        nz.clear();
        nz.extend((0..n).filter(|&j| dy_row[j] != 0.0));
        if nz.is_empty() {
            continue;
        }
        let out_row = &mut out[i * k..(i + 1) * k];
        if nz.len() * 4 < n {
            for (p, o) in out_row.iter_mut().enumerate() {
                let w_row = &w[p * n..(p + 1) * n];
                let mut s = 0.0;
                for &j in &nz {
                    s += dy_row[j] * w_row[j];
                }
                *o += s;
            }
        } else {
            for (p, o) in out_row.iter_mut().enumerate() {
                *o += dot(dy_row, &w[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Sum whose result does not depend on the order of `values`.
pub(crate) fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}
