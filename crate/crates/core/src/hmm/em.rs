use std::f64::consts::PI;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use super::{GaussianHmm, HmmError};
use crate::klcore::Transition;
use crate::linalg::{apply_covariance_floor, CsrMatrix};

#[derive(Debug, Clone, Copy)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop once `(ll_new − ll_old) < tol · max(1, |ll_old|)`.
    pub tol: f64,
    /// Eigenvalue floor for emission covariances; `None` derives it from the
    /// data as `1e-6 ·` median squared distance from the grand mean.
    pub covariance_floor: Option<f64>,
    /// Share a single emission covariance across all states.
    pub tied_covariance: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-6, covariance_floor: None, tied_covariance: false }
    }
}

#[derive(Debug, Clone)]
pub struct EmReport {
    /// Log-likelihood of the data under the model after each M-step, starting
    /// with the initial model.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of covariance updates that hit the eigenvalue floor.
    pub floor_hits: usize,
}

/// Smoothed marginals of one sequence.
#[derive(Debug, Clone)]
pub struct Posterior {
    /// `gamma[t][k] = P(x_t = k | y_{1:T})`.
    pub gamma: Vec<Vec<f64>>,
    /// Expected transition counts, on the sparsity pattern of the model.
    pub transition_counts: CsrMatrix,
    pub log_likelihood: f64,
}

/// Per-state whitening data for allocation-free log-density evaluation.
struct Whitener {
    mean: Vec<f64>,
    /// Row-major inverse of the lower Cholesky factor.
    inv_chol: Vec<f64>,
    log_norm: f64,
}

impl Whitener {
    fn new(model: &GaussianHmm, k: usize) -> Self {
        let g = model.emission(k);
        let d = g.mean().len();
        let chol = g.cov().clone().cholesky().expect("emission covariances are positive definite");
        let l_inv = chol.l().try_inverse().expect("Cholesky factor is invertible");
        let mut inv_chol = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                inv_chol[i * d + j] = l_inv[(i, j)];
            }
        }
        Self {
            mean: g.mean().iter().copied().collect(),
            inv_chol,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + g.log_det()),
        }
    }

    fn log_density(&self, y: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.mean.len();
        for (s, (a, b)) in scratch.iter_mut().zip(y.iter().zip(&self.mean)) {
            *s = a - b;
        }
        let mut q = 0.0;
        for i in 0..d {
            let row = &self.inv_chol[i * d..i * d + i + 1];
            let z: f64 = row.iter().zip(&scratch[..=i]).map(|(l, s)| l * s).sum();
            q += z * z;
        }
        self.log_norm - 0.5 * q
    }
}

/// Row-major `T × N` table of log emission densities.
pub(crate) fn log_likelihood_table(model: &GaussianHmm, seq: &[DVector<f64>]) -> Vec<f64> {
    let n = model.n_states();
    let whiteners: Vec<Whitener> = (0..n).map(|k| Whitener::new(model, k)).collect();
    let mut scratch = vec![0.0; model.dim()];
    let mut out = Vec::with_capacity(seq.len() * n);
    for y in seq {
        let y = y.as_slice();
        for w in &whiteners {
            out.push(w.log_density(y, &mut scratch));
        }
    }
    out
}

/// Rescaled forward-backward pass.
///
/// Each step's likelihoods are shifted by their maximum over the predicted
/// support before exponentiating, and the forward messages are normalized;
/// the log-likelihood accumulates the logs of shifts and normalizers.
pub fn forward_backward(model: &GaussianHmm, seq: &[DVector<f64>]) -> Result<Posterior, HmmError> {
    let p = model.transition().to_sparse();
    let ll = log_likelihood_table(model, seq);
    forward_backward_table(&p, model.initial(), &ll, seq.len())
}

pub(crate) fn forward_backward_table(
    p: &CsrMatrix,
    initial: &[f64],
    ll: &[f64],
    t_len: usize,
) -> Result<Posterior, HmmError> {
    let n = initial.len();
    if t_len == 0 {
        return Err(HmmError::InvalidData("empty sequence".into()));
    }
    // alpha holds normalized forward messages; b holds shifted likelihoods.
    let mut alpha = vec![0.0; t_len * n];
    let mut b = vec![0.0; t_len * n];
    let mut norm = vec![0.0; t_len];
    let mut log_likelihood = 0.0;
    let mut predicted = initial.to_vec();
    for t in 0..t_len {
        if t > 0 {
            p.tr_mul_vec_into(&alpha[(t - 1) * n..t * n], &mut predicted);
        }
        let llt = &ll[t * n..(t + 1) * n];
        let shift = predicted
            .iter()
            .zip(llt)
            .filter(|(w, _)| **w > 0.0)
            .map(|(_, l)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            let max_log_density = llt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            return Err(HmmError::ZeroLikelihood { max_log_density });
        }
        let mut s = 0.0;
        for k in 0..n {
            let bk = (llt[k] - shift).exp();
            b[t * n + k] = bk;
            let a = predicted[k] * bk;
            alpha[t * n + k] = a;
            s += a;
        }
        if !(s > 0.0 && s.is_finite()) {
            return Err(HmmError::NumericalUnderflow { step: t });
        }
        alpha[t * n..(t + 1) * n].iter_mut().for_each(|a| *a /= s);
        norm[t] = s;
        log_likelihood += s.ln() + shift;
    }

    let mut counts = p.clone();
    counts.values.iter_mut().for_each(|v| *v = 0.0);
    let mut gamma = vec![vec![0.0; n]; t_len];
    let mut beta = vec![1.0; n];
    let mut weighted = vec![0.0; n];
    let mut next_beta = vec![0.0; n];
    gamma[t_len - 1].copy_from_slice(&alpha[(t_len - 1) * n..]);
    for t in (0..t_len - 1).rev() {
        for j in 0..n {
            weighted[j] = b[(t + 1) * n + j] * beta[j] / norm[t + 1];
        }
        let at = &alpha[t * n..(t + 1) * n];
        for i in 0..n {
            let mut acc = 0.0;
            for idx in p.indptr[i]..p.indptr[i + 1] {
                let term = p.values[idx] * weighted[p.indices[idx]];
                acc += term;
                counts.values[idx] += at[i] * term;
            }
            next_beta[i] = acc;
        }
        std::mem::swap(&mut beta, &mut next_beta);
        let g = &mut gamma[t];
        let mut s = 0.0;
        for i in 0..n {
            g[i] = at[i] * beta[i];
            s += g[i];
        }
        if s > 0.0 {
            g.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(Posterior { gamma, transition_counts: counts, log_likelihood })
}

/// Baum-Welch over one or more sequences, starting from `init`.
///
/// Zero transition entries of `init` remain zero. States whose expected
/// occupancy is negligible keep their previous emission, and rows with no
/// expected outgoing transitions keep their previous row.
pub fn em_fit(
    sequences: &[Vec<DVector<f64>>],
    init: &GaussianHmm,
    opts: EmOptions,
) -> Result<(GaussianHmm, EmReport), HmmError> {
    if sequences.is_empty() || sequences.iter().any(|s| s.is_empty()) {
        return Err(HmmError::InvalidData("every sequence must be nonempty".into()));
    }
    let d = init.dim();
    if sequences.iter().flatten().any(|y| y.len() != d || y.iter().any(|v| !v.is_finite())) {
        return Err(HmmError::InvalidData(format!("observations must be finite {d}-vectors")));
    }
    let floor = match opts.covariance_floor {
        Some(f) => f,
        None => {
            let flat: Vec<DVector<f64>> = sequences.iter().flatten().cloned().collect();
            super::kmeans::covariance_floor(&flat)
        }
    };

    let mut model = init.clone();
    let mut trace = Vec::new();
    let mut floor_hits = 0;
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let p = model.transition().to_sparse();
        let mut posteriors = Vec::with_capacity(sequences.len());
        let mut ll = 0.0;
        for seq in sequences {
            let table = log_likelihood_table(&model, seq);
            let post = forward_backward_table(&p, model.initial(), &table, seq.len())?;
            ll += post.log_likelihood;
            posteriors.push(post);
        }
        if let Some(&prev) = trace.last() {
            let gain = ll - prev;
            if gain < -1e-9 * f64::max(1.0, f64::abs(prev)) {
                warn!("EM log-likelihood decreased by {}", -gain);
            }
            if gain < opts.tol * f64::max(1.0, f64::abs(prev)) {
                converged = true;
            }
        }
        trace.push(ll);
        debug!("EM iteration {iterations}: log-likelihood {ll}");
        if converged || iterations >= opts.max_iter {
            break;
        }
        let (next, hits) = m_step(&model, &p, sequences, &posteriors, floor, opts.tied_covariance)?;
        floor_hits += hits;
        model = next;
        iterations += 1;
    }
    Ok((model, EmReport { trace, iterations, converged, floor_hits }))
}

fn m_step(
    model: &GaussianHmm,
    p: &CsrMatrix,
    sequences: &[Vec<DVector<f64>>],
    posteriors: &[Posterior],
    floor: f64,
    tied: bool,
) -> Result<(GaussianHmm, usize), HmmError> {
    let n = model.n_states();
    let d = model.dim();

    let mut counts = p.clone();
    counts.values.iter_mut().for_each(|v| *v = 0.0);
    let mut initial = vec![0.0; n];
    for post in posteriors {
        for (c, v) in counts.values.iter_mut().zip(&post.transition_counts.values) {
            *c += v;
        }
        for (a, g) in initial.iter_mut().zip(&post.gamma[0]) {
            *a += g;
        }
    }
    let total: f64 = initial.iter().sum();
    initial.iter_mut().for_each(|a| *a /= total);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let range = counts.indptr[i]..counts.indptr[i + 1];
        let s: f64 = counts.values[range.clone()].iter().sum();
        let row: Vec<(usize, f64)> = if s > 0.0 && s.is_finite() {
            range.map(|idx| (counts.indices[idx], counts.values[idx] / s)).collect()
        } else {
            p.row(i).collect()
        };
        rows.push(row);
    }
    let transition = Transition::sparse(CsrMatrix::from_rows(n, rows));

    let mut occupancy = vec![0.0; n];
    let mut sums = vec![DVector::<f64>::zeros(d); n];
    for (seq, post) in sequences.iter().zip(posteriors) {
        for (y, g) in seq.iter().zip(&post.gamma) {
            for k in 0..n {
                if g[k] > 0.0 {
                    occupancy[k] += g[k];
                    sums[k].axpy(g[k], y, 1.0);
                }
            }
        }
    }
    let t_total: f64 = sequences.iter().map(|s| s.len() as f64).sum();
    let negligible = 1e-10 * t_total;
    let means: Vec<DVector<f64>> = (0..n)
        .map(|k| if occupancy[k] > negligible { &sums[k] / occupancy[k] } else { model.mean(k).clone() })
        .collect();

    let mut scatter = vec![DMatrix::<f64>::zeros(d, d); n];
    let mut diff = DVector::<f64>::zeros(d);
    for (seq, post) in sequences.iter().zip(posteriors) {
        for (y, g) in seq.iter().zip(&post.gamma) {
            for k in 0..n {
                if g[k] > 0.0 {
                    diff.copy_from(y);
                    diff -= &means[k];
                    scatter[k].ger(g[k], &diff, &diff, 1.0);
                }
            }
        }
    }
    let mut hits = 0;
    let covariances: Vec<DMatrix<f64>> = if tied {
        let mut pooled = DMatrix::<f64>::zeros(d, d);
        for s in &scatter {
            pooled += s;
        }
        pooled /= t_total;
        if apply_covariance_floor(&mut pooled, floor) {
            hits += 1;
        }
        vec![pooled; n]
    } else {
        (0..n)
            .map(|k| {
                if occupancy[k] > negligible {
                    let mut c = &scatter[k] / occupancy[k];
                    if apply_covariance_floor(&mut c, floor) {
                        hits += 1;
                    }
                    c
                } else {
                    model.covariance(k).clone()
                }
            })
            .collect()
    };
    let next = GaussianHmm::new(transition, means, covariances, initial)?;
    Ok((next, hits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::{filter_init, filter_step};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn truth() -> GaussianHmm {
        GaussianHmm::new(
            Transition::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]),
            vec![DVector::from_element(1, -3.0), DVector::from_element(1, 3.0)],
            vec![DMatrix::from_element(1, 1, 1.0); 2],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    fn sample(model: &GaussianHmm, t_len: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut x = crate::linalg::sample_index(model.initial(), rng.gen());
        let mut out = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let sd = model.covariance(x)[(0, 0)].sqrt();
            out.push(DVector::from_element(1, model.mean(x)[0] + sd * noise.sample(&mut rng)));
            let row: Vec<f64> = (0..model.n_states()).map(|j| model.transition().get(x, j)).collect();
            x = crate::linalg::sample_index(&row, rng.gen());
        }
        out
    }

    /// Unscaled forward algorithm over explicit products, for short sequences.
    fn brute_log_likelihood(model: &GaussianHmm, seq: &[DVector<f64>]) -> f64 {
        let n = model.n_states();
        let mut alpha: Vec<f64> =
            (0..n).map(|k| model.initial()[k] * model.emission(k).log_density(&seq[0]).exp()).collect();
        for y in &seq[1..] {
            alpha = (0..n)
                .map(|j| {
                    let s: f64 = (0..n).map(|i| alpha[i] * model.transition().get(i, j)).sum();
                    s * model.emission(j).log_density(y).exp()
                })
                .collect();
        }
        alpha.iter().sum::<f64>().ln()
    }

    #[test]
    fn log_likelihood_matches_unscaled_forward() {
        let m = truth();
        let seq = sample(&m, 30, 1);
        let post = forward_backward(&m, &seq).unwrap();
        let oracle = brute_log_likelihood(&m, &seq);
        assert!((post.log_likelihood - oracle).abs() < 1e-10 * oracle.abs());
    }

    #[test]
    fn fast_log_density_matches_gaussian() {
        let m = GaussianHmm::new(
            Transition::from_rows(&[vec![1.0]]),
            vec![DVector::from_vec(vec![0.3, -1.0])],
            vec![DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 0.5])],
            vec![1.0],
        )
        .unwrap();
        let y = DVector::from_vec(vec![1.7, 0.2]);
        let table = log_likelihood_table(&m, std::slice::from_ref(&y));
        assert!((table[0] - m.emission(0).log_density(&y)).abs() < 1e-12);
    }

    #[test]
    fn final_smoothed_marginal_equals_filter() {
        let m = truth();
        let seq = sample(&m, 50, 2);
        let post = forward_backward(&m, &seq).unwrap();
        let mut f = filter_init(&m, &seq[0]).unwrap();
        for y in &seq[1..] {
            f = filter_step(&m, &f, m.transition(), y).unwrap();
        }
        for k in 0..2 {
            assert!((post.gamma[49][k] - f.weights[k]).abs() < 1e-12);
        }
        assert!((post.log_likelihood - f.log_evidence).abs() < 1e-9);
        for g in &post.gamma {
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let xi_total: f64 = post.transition_counts.values.iter().sum();
        assert!((xi_total - 49.0).abs() < 1e-9);
    }

    #[test]
    fn recovers_two_state_transitions() {
        let m = truth();
        let seq = sample(&m, 10_000, 3);
        let init = GaussianHmm::new(
            Transition::from_rows(&[vec![0.6, 0.4], vec![0.4, 0.6]]),
            vec![DVector::from_element(1, -1.0), DVector::from_element(1, 1.0)],
            vec![DMatrix::from_element(1, 1, 4.0); 2],
            vec![0.5, 0.5],
        )
        .unwrap();
        let (fit, report) = em_fit(&[seq], &init, EmOptions::default()).unwrap();
        assert!(report.converged);
        for i in 0..2 {
            for j in 0..2 {
                assert!((fit.transition().get(i, j) - m.transition().get(i, j)).abs() < 0.05);
            }
        }
        for w in report.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn single_state_gives_sample_moments() {
        let data: Vec<DVector<f64>> = [1.0, 2.0, 4.0, 7.0].iter().map(|&v| DVector::from_element(1, v)).collect();
        let init = GaussianHmm::new(
            Transition::from_rows(&[vec![1.0]]),
            vec![DVector::zeros(1)],
            vec![DMatrix::identity(1, 1)],
            vec![1.0],
        )
        .unwrap();
        let (fit, _) = em_fit(&[data], &init, EmOptions { max_iter: 1, ..Default::default() }).unwrap();
        assert_eq!(fit.transition().get(0, 0), 1.0);
        assert!((fit.mean(0)[0] - 3.5).abs() < 1e-12);
        assert!((fit.covariance(0)[(0, 0)] - 5.25).abs() < 1e-12);
    }

    #[test]
    fn one_step_from_truth_does_not_decrease() {
        let m = truth();
        let seq = sample(&m, 2_000, 4);
        let (_, report) = em_fit(&[seq], &m, EmOptions { max_iter: 1, tol: 0.0, ..Default::default() }).unwrap();
        assert_eq!(report.trace.len(), 2);
        assert!(report.trace[1] >= report.trace[0] - 1e-9 * report.trace[0].abs());
    }

    #[test]
    fn zero_transitions_stay_zero() {
        let m = GaussianHmm::new(
            Transition::from_rows(&[vec![0.5, 0.5, 0.0], vec![0.0, 0.5, 0.5], vec![0.5, 0.0, 0.5]]),
            vec![DVector::from_element(1, -2.0), DVector::zeros(1), DVector::from_element(1, 2.0)],
            vec![DMatrix::identity(1, 1); 3],
            vec![1.0 / 3.0; 3],
        )
        .unwrap();
        let seq = sample(&m, 500, 5);
        let (fit, _) = em_fit(&[seq], &m, EmOptions { max_iter: 5, ..Default::default() }).unwrap();
        assert_eq!(fit.transition().get(0, 2), 0.0);
        assert_eq!(fit.transition().get(1, 0), 0.0);
        assert_eq!(fit.transition().get(2, 1), 0.0);
    }

    #[test]
    fn tied_covariance_is_shared() {
        let m = truth();
        let seq = sample(&m, 500, 6);
        let opts = EmOptions { max_iter: 3, tied_covariance: true, ..Default::default() };
        let (fit, _) = em_fit(&[seq], &m, opts).unwrap();
        assert_eq!(fit.covariance(0), fit.covariance(1));
    }
}
