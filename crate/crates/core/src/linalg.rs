//! Small numerical building blocks shared by the solvers and models:
//! a compressed-sparse-row matrix, a cached multivariate Gaussian, and a
//! handful of probability-vector helpers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Row-major compressed sparse matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Keeps entries with `|a_ij| > threshold` (use 0.0 to keep every nonzero).
    pub fn from_dense(dense: &DMatrix<f64>, threshold: f64) -> Self {
        let (n_rows, n_cols) = dense.shape();
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for i in 0..n_rows {
            for j in 0..n_cols {
                let v = dense[(i, j)];
                if v.abs() > threshold {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self { n_rows, n_cols, indptr, indices, values }
    }

    /// Builds from per-row `(column, value)` lists. Columns are sorted and
    /// duplicates summed.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n_rows = rows.len();
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(j, _)| j);
            let mut last: Option<usize> = None;
            for (j, v) in row {
                debug_assert!(j < n_cols);
                if last == Some(j) {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(j);
                    values.push(v);
                    last = Some(j);
                }
            }
            indptr.push(indices.len());
        }
        Self { n_rows, n_cols, indptr, indices, values }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        self.indices[a..b].iter().copied().zip(self.values[a..b].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        match self.indices[a..b].binary_search(&j) {
            Ok(pos) => self.values[a + pos],
            Err(_) => 0.0,
        }
    }

    /// `A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows];
        self.mul_vec_into(x, &mut out);
        out
    }

    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        for (i, o) in out.iter_mut().enumerate().take(self.n_rows) {
            let mut acc = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            *o = acc;
        }
    }

    /// `Aᵀ w`
    pub fn tr_mul_vec(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        self.tr_mul_vec_into(w, &mut out);
        out
    }

    pub fn tr_mul_vec_into(&self, w: &[f64], out: &mut [f64]) {
        debug_assert_eq!(w.len(), self.n_rows);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            for k in self.indptr[i]..self.indptr[i + 1] {
                out[self.indices[k]] += wi * self.values[k];
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                d[(i, j)] = v;
            }
        }
        d
    }
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl Gaussian {
    /// Returns `None` when `cov` is not symmetric positive-definite.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Option<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return None;
        }
        let chol = Cholesky::new(cov.clone())?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return None;
        }
        let log_norm = -0.5 * (d as f64 * (2.0 * PI).ln() + log_det);
        Some(Self { mean, cov, chol, log_norm })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_det(&self) -> f64 {
        -2.0 * self.log_norm - self.mean.len() as f64 * (2.0 * PI).ln()
    }

    /// Squared Mahalanobis distance of `y` from the mean.
    pub fn mahalanobis2(&self, y: &DVector<f64>) -> f64 {
        let diff = y - &self.mean;
        let sol = self.chol.l().solve_lower_triangular(&diff).expect("triangular solve");
        sol.norm_squared()
    }

    pub fn log_density(&self, y: &DVector<f64>) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis2(y)
    }
}

/// Symmetric part of `m`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    sym.clone().symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Adds `floor · I` when the smallest eigenvalue of `cov` drops below `floor`.
/// Returns whether the floor was applied.
pub fn apply_covariance_floor(cov: &mut DMatrix<f64>, floor: f64) -> bool {
    *cov = symmetrize(cov);
    if min_eigenvalue(cov) < floor {
        for i in 0..cov.nrows() {
            cov[(i, i)] += floor;
        }
        true
    } else {
        false
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalizes in place and returns the previous sum.
pub fn normalize(v: &mut [f64]) -> f64 {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
    s
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `KL(u ‖ p)` for two discrete distributions given as sparse rows.
/// Returns `+∞` when `u` puts mass where `p` has none.
pub fn kl_divergence(u: &[(usize, f64)], p: &[(usize, f64)]) -> f64 {
    let mut total = 0.0;
    for &(j, uj) in u {
        if uj <= 0.0 {
            continue;
        }
        let pj = p.iter().find(|&&(k, _)| k == j).map(|&(_, v)| v).unwrap_or(0.0);
        if pj <= 0.0 {
            return f64::INFINITY;
        }
        total += uj * (uj / pj).ln();
    }
    total
}

/// Total-variation distance between two probability vectors.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Median of a non-empty slice (NaNs sort last).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Inverse-CDF draw from a discrete distribution with a supplied uniform.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
