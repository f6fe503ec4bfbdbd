use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::format::dmatrix;
use crate::linalg::CsrMatrix;

/// A row-stochastic transition operator `T(x'|x)`.
///
/// Besides plain dense and sparse storage, two structured forms avoid
/// materializing large joint-state matrices:
///
/// * `Kronecker`: a product of independent chains. Joint index
///   `i = Σ_m i_m · Π_{l<m} K_l`, so chain 0 varies fastest.
/// * `Tilted`: `T(x'|x) = base(x'|x) · w(x') / n(x)`, the form of an
///   optimal KL-control law. Rows with `n(x) = 0` are dead ends and fall
///   back to the base row so that the operator stays stochastic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    Dense {
        #[serde(with = "dmatrix")]
        matrix: DMatrix<f64>,
    },
    Sparse {
        matrix: CsrMatrix,
    },
    Kronecker {
        chains: Vec<CsrMatrix>,
    },
    Tilted {
        base: Box<Transition>,
        weights: Vec<f64>,
        normalizer: Vec<f64>,
    },
}

impl Transition {
    pub fn dense(matrix: DMatrix<f64>) -> Self {
        Transition::Dense { matrix }
    }

    pub fn sparse(matrix: CsrMatrix) -> Self {
        Transition::Sparse { matrix }
    }

    pub fn kronecker(chains: Vec<CsrMatrix>) -> Self {
        Transition::Kronecker { chains }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Transition::dense(DMatrix::from_row_slice(n, m, &flat))
    }

    pub fn n_states(&self) -> usize {
        match self {
            Transition::Dense { matrix } => matrix.nrows(),
            Transition::Sparse { matrix } => matrix.n_rows,
            Transition::Kronecker { chains } => chains.iter().map(|c| c.n_rows).product(),
            Transition::Tilted { base, .. } => base.n_states(),
        }
    }

    /// `y(x) = Σ_x' T(x'|x) f(x')`, the conditional expectation of `f`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        match self {
            Transition::Dense { matrix } => {
                let n = matrix.nrows();
                (0..n).map(|i| matrix.row(i).iter().zip(f).map(|(a, b)| a * b).sum()).collect()
            }
            Transition::Sparse { matrix } => matrix.mul_vec(f),
            Transition::Kronecker { chains } => kron_apply(chains, f, false),
            Transition::Tilted { base, weights, normalizer } => {
                let wf: Vec<f64> = weights.iter().zip(f).map(|(w, x)| w * x).collect();
                let mut out = base.apply(&wf);
                let dead: Vec<usize> = (0..out.len()).filter(|&i| normalizer[i] <= 0.0).collect();
                for (o, n) in out.iter_mut().zip(normalizer) {
                    if *n > 0.0 {
                        *o /= n;
                    }
                }
                if !dead.is_empty() {
                    let plain = base.apply(f);
                    for i in dead {
                        out[i] = plain[i];
                    }
                }
                out
            }
        }
    }

    /// `y(x') = Σ_x w(x) T(x'|x)`, pushing a distribution one step forward.
    pub fn propagate(&self, w: &[f64]) -> Vec<f64> {
        match self {
            Transition::Dense { matrix } => {
                let (n, m) = matrix.shape();
                let mut out = vec![0.0; m];
                for i in 0..n {
                    let wi = w[i];
                    if wi == 0.0 {
                        continue;
                    }
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += wi * matrix[(i, j)];
                    }
                }
                out
            }
            Transition::Sparse { matrix } => matrix.tr_mul_vec(w),
            Transition::Kronecker { chains } => kron_apply(chains, w, true),
            Transition::Tilted { base, weights, normalizer } => {
                let mut dead_mass = vec![0.0; w.len()];
                let mut any_dead = false;
                let scaled: Vec<f64> = w
                    .iter()
                    .zip(normalizer)
                    .enumerate()
                    .map(|(i, (&wi, &n))| {
                        if n > 0.0 {
                            wi / n
                        } else {
                            if wi != 0.0 {
                                dead_mass[i] = wi;
                                any_dead = true;
                            }
                            0.0
                        }
                    })
                    .collect();
                let mut out = base.propagate(&scaled);
                for (o, z) in out.iter_mut().zip(weights) {
                    *o *= z;
                }
                if any_dead {
                    let extra = base.propagate(&dead_mass);
                    for (o, e) in out.iter_mut().zip(extra) {
                        *o += e;
                    }
                }
                out
            }
        }
    }

    /// Nonzero entries of row `i` in increasing column order.
    pub fn row(&self, i: usize) -> Vec<(usize, f64)> {
        match self {
            Transition::Dense { matrix } => {
                (0..matrix.ncols()).filter_map(|j| (matrix[(i, j)] != 0.0).then(|| (j, matrix[(i, j)]))).collect()
            }
            Transition::Sparse { matrix } => matrix.row(i).filter(|&(_, v)| v != 0.0).collect(),
            Transition::Kronecker { chains } => {
                let mut entries = vec![(0usize, 1.0f64)];
                let mut rem = i;
                let mut stride = 1;
                for c in chains {
                    let k = c.n_rows;
                    let digit = rem % k;
                    rem /= k;
                    let row: Vec<(usize, f64)> = c.row(digit).filter(|&(_, v)| v != 0.0).collect();
                    let mut next = Vec::with_capacity(entries.len() * row.len());
                    for &(j0, p0) in &entries {
                        for &(j, p) in &row {
                            next.push((j0 + j * stride, p0 * p));
                        }
                    }
                    entries = next;
                    stride *= k;
                }
                entries.sort_by_key(|&(j, _)| j);
                entries
            }
            Transition::Tilted { base, weights, normalizer } => {
                let n = normalizer[i];
                let row = base.row(i);
                if n > 0.0 {
                    row.into_iter()
                        .map(|(j, p)| (j, p * weights[j] / n))
                        .filter(|&(_, v)| v != 0.0)
                        .collect()
                } else {
                    row
                }
            }
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            Transition::Dense { matrix } => matrix[(i, j)],
            Transition::Sparse { matrix } => matrix.get(i, j),
            _ => self.row(i).into_iter().find(|&(k, _)| k == j).map_or(0.0, |(_, v)| v),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Transition::Dense { matrix } => matrix.clone(),
            _ => {
                let n = self.n_states();
                let mut d = DMatrix::zeros(n, n);
                for i in 0..n {
                    for (j, v) in self.row(i) {
                        d[(i, j)] = v;
                    }
                }
                d
            }
        }
    }

    /// Materializes structured forms into CSR storage.
    pub fn to_sparse(&self) -> CsrMatrix {
        match self {
            Transition::Sparse { matrix } => matrix.clone(),
            Transition::Dense { matrix } => CsrMatrix::from_dense(matrix, 0.0),
            _ => {
                let n = self.n_states();
                CsrMatrix::from_rows(n, (0..n).map(|i| self.row(i)).collect())
            }
        }
    }

    /// Row indices whose tilted normalizer vanished (always empty for
    /// untilted operators).
    pub fn dead_ends(&self) -> Vec<usize> {
        match self {
            Transition::Tilted { normalizer, .. } => {
                normalizer.iter().enumerate().filter(|(_, &n)| n <= 0.0).map(|(i, _)| i).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Checks entries lie in `[0, 1]` and every row sums to one within `tol`.
    pub fn check_stochastic(&self, tol: f64) -> Result<(), String> {
        match self {
            Transition::Kronecker { chains } => {
                for (m, c) in chains.iter().enumerate() {
                    if c.n_rows != c.n_cols {
                        return Err(format!("chain {m} is not square"));
                    }
                    Transition::sparse(c.clone()).check_stochastic(tol).map_err(|e| format!("chain {m}: {e}"))?;
                }
                Ok(())
            }
            Transition::Dense { matrix } if matrix.nrows() != matrix.ncols() => Err("matrix is not square".into()),
            _ => {
                for i in 0..self.n_states() {
                    let row = self.row(i);
                    let mut s = 0.0;
                    for (j, v) in row {
                        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                            return Err(format!("entry ({i},{j}) = {v} outside [0,1]"));
                        }
                        s += v;
                    }
                    if (s - 1.0).abs() > tol {
                        return Err(format!("row {i} sums to {s}"));
                    }
                }
                Ok(())
            }
        }
    }
}

fn kron_apply(chains: &[CsrMatrix], x: &[f64], transpose: bool) -> Vec<f64> {
    let n = x.len();
    let mut cur = x.to_vec();
    let mut next = vec![0.0; n];
    let mut stride = 1;
    for c in chains {
        let k = c.n_rows;
        let block = stride * k;
        let mut fiber = vec![0.0; k];
        let mut res = vec![0.0; k];
        for outer in 0..n / block {
            for inner in 0..stride {
                let base = outer * block + inner;
                for (a, f) in fiber.iter_mut().enumerate() {
                    *f = cur[base + a * stride];
                }
                if transpose {
                    c.tr_mul_vec_into(&fiber, &mut res);
                } else {
                    c.mul_vec_into(&fiber, &mut res);
                }
                for (a, r) in res.iter().enumerate() {
                    next[base + a * stride] = *r;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
        stride *= k;
    }
    cur
}
