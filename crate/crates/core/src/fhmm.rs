//! Factorial HMMs: `M` independent `K`-valued chains whose 1-of-K states
//! add up, through per-chain weight matrices, to the mean of a Gaussian
//! observation with shared covariance. Inference is structured mean field.

use std::f64::consts::PI;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{dmatrix, dmatrix_vec};
use crate::hmm::{covariance_floor, forward_backward_table, GaussianHmm, HmmError};
use crate::klcore::{Transition, STOCHASTIC_TOL};
use crate::linalg::{apply_covariance_floor, sample_index, CsrMatrix};

/// Default cap on `K^M` for [`flatten_to_hmm`].
pub const DEFAULT_FLATTEN_CAP: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FhmmError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("variational bound decreased by {drop:e} in sweep {sweep}")]
    BoundDecrease { sweep: usize, drop: f64 },
    #[error("{states} joint states exceed the cap of {cap}")]
    CapExceeded { states: usize, cap: usize },
    #[error(transparent)]
    Hmm(#[from] HmmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FactorialHmmRecord", into = "FactorialHmmRecord")]
pub struct FactorialHmm {
    transitions: Vec<CsrMatrix>,
    weights: Vec<DMatrix<f64>>,
    obs_cov: DMatrix<f64>,
    initials: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FactorialHmmRecord {
    n_chains: usize,
    n_values: usize,
    transitions: Vec<CsrMatrix>,
    #[serde(with = "dmatrix_vec")]
    weights: Vec<DMatrix<f64>>,
    #[serde(with = "dmatrix")]
    obs_cov: DMatrix<f64>,
    initials: Vec<Vec<f64>>,
}

impl TryFrom<FactorialHmmRecord> for FactorialHmm {
    type Error = FhmmError;
    fn try_from(r: FactorialHmmRecord) -> Result<Self, FhmmError> {
        let m = FactorialHmm::new(r.transitions, r.weights, r.obs_cov, r.initials)?;
        if m.n_chains() != r.n_chains || m.n_values() != r.n_values {
            return Err(FhmmError::InvalidModel("declared shape does not match payload".into()));
        }
        Ok(m)
    }
}

impl From<FactorialHmm> for FactorialHmmRecord {
    fn from(m: FactorialHmm) -> Self {
        FactorialHmmRecord {
            n_chains: m.n_chains(),
            n_values: m.n_values(),
            transitions: m.transitions,
            weights: m.weights,
            obs_cov: m.obs_cov,
            initials: m.initials,
        }
    }
}

impl FactorialHmm {
    pub fn new(
        transitions: Vec<CsrMatrix>,
        weights: Vec<DMatrix<f64>>,
        obs_cov: DMatrix<f64>,
        initials: Vec<Vec<f64>>,
    ) -> Result<Self, FhmmError> {
        let m = transitions.len();
        if m == 0 {
            return Err(FhmmError::InvalidModel("no chains".into()));
        }
        if weights.len() != m || initials.len() != m {
            return Err(FhmmError::InvalidModel(format!(
                "{m} chains but {} weight matrices and {} initial distributions",
                weights.len(),
                initials.len()
            )));
        }
        let k = transitions[0].n_rows;
        let d = obs_cov.nrows();
        if k == 0 || d == 0 || !obs_cov.is_square() {
            return Err(FhmmError::InvalidModel("empty chain values or malformed covariance".into()));
        }
        for c in 0..m {
            let t = &transitions[c];
            if t.n_rows != k || t.n_cols != k {
                return Err(FhmmError::InvalidModel(format!("chain {c}: transition is not {k}x{k}")));
            }
            Transition::sparse(t.clone())
                .check_stochastic(STOCHASTIC_TOL)
                .map_err(|e| FhmmError::InvalidModel(format!("chain {c}: {e}")))?;
            if weights[c].shape() != (d, k) || weights[c].iter().any(|v| !v.is_finite()) {
                return Err(FhmmError::InvalidModel(format!("chain {c}: weights must be finite {d}x{k}")));
            }
            if initials[c].len() != k {
                return Err(FhmmError::InvalidModel(format!("chain {c}: initial has wrong length")));
            }
            crate::hmm::check_distribution(&initials[c], STOCHASTIC_TOL)
                .map_err(|e| FhmmError::InvalidModel(format!("chain {c} initial: {e}")))?;
        }
        if (&obs_cov - obs_cov.transpose()).abs().max() > 1e-9 * obs_cov.abs().max().max(1.0)
            || Cholesky::new(obs_cov.clone()).is_none()
        {
            return Err(FhmmError::InvalidModel("observation covariance is not symmetric positive definite".into()));
        }
        Ok(Self { transitions, weights, obs_cov, initials })
    }

    /// Weights that place value `k` of a uniform `K`-point grid over
    /// `[lo, hi]` in observation row `m` for chain `m`; `D = M`.
    pub fn grid_weights(n_chains: usize, n_values: usize, lo: f64, hi: f64) -> Vec<DMatrix<f64>> {
        let grid = value_grid(n_values, lo, hi);
        (0..n_chains)
            .map(|m| {
                let mut w = DMatrix::zeros(n_chains, n_values);
                for (k, v) in grid.iter().enumerate() {
                    w[(m, k)] = *v;
                }
                w
            })
            .collect()
    }

    /// Same model with uniform initial distributions on every chain.
    pub fn with_uniform_initials(&self) -> Self {
        let k = self.n_values();
        Self { initials: vec![vec![1.0 / k as f64; k]; self.n_chains()], ..self.clone() }
    }

    pub fn n_chains(&self) -> usize {
        self.transitions.len()
    }

    pub fn n_values(&self) -> usize {
        self.transitions[0].n_rows
    }

    pub fn dim(&self) -> usize {
        self.obs_cov.nrows()
    }

    pub fn transitions(&self) -> &[CsrMatrix] {
        &self.transitions
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn obs_cov(&self) -> &DMatrix<f64> {
        &self.obs_cov
    }

    pub fn initials(&self) -> &[Vec<f64>] {
        &self.initials
    }

    /// Observation mean `Σ_m W^(m) e_{k_m}` of a joint configuration.
    pub fn joint_mean(&self, values: &[usize]) -> DVector<f64> {
        let mut mean = DVector::zeros(self.dim());
        for (w, &k) in self.weights.iter().zip(values) {
            mean += w.column(k);
        }
        mean
    }

    pub fn with_obs_cov(&self, obs_cov: DMatrix<f64>) -> Result<Self, FhmmError> {
        Self::new(self.transitions.clone(), self.weights.clone(), obs_cov, self.initials.clone())
    }

    /// Draws chain states (`[t][m]`) and observations.
    pub fn sample<R: Rng>(&self, len: usize, rng: &mut R) -> (Vec<Vec<usize>>, Vec<DVector<f64>>) {
        let chol = Cholesky::new(self.obs_cov.clone()).expect("validated covariance").l();
        let mut x: Vec<usize> = self.initials.iter().map(|p| sample_index(p, rng.gen())).collect();
        let mut states = Vec::with_capacity(len);
        let mut obs = Vec::with_capacity(len);
        for _ in 0..len {
            let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
            obs.push(self.joint_mean(&x) + &chol * z);
            states.push(x.clone());
            x = x
                .iter()
                .zip(&self.transitions)
                .map(|(&k, t)| {
                    let row: Vec<f64> = (0..t.n_cols).map(|j| t.get(k, j)).collect();
                    sample_index(&row, rng.gen())
                })
                .collect();
        }
        (states, obs)
    }
}

/// Uniform `K`-point grid over `[lo, hi]` (endpoints included).
pub fn value_grid(n_values: usize, lo: f64, hi: f64) -> Vec<f64> {
    if n_values == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n_values).map(|k| lo + (hi - lo) * k as f64 / (n_values - 1) as f64).collect()
}

/// Joint index of per-chain values; chain 0 varies fastest.
pub fn encode_joint(values: &[usize], n_values: usize) -> usize {
    values.iter().rev().fold(0, |acc, &k| acc * n_values + k)
}

pub fn decode_joint(mut index: usize, n_chains: usize, n_values: usize) -> Vec<usize> {
    (0..n_chains)
        .map(|_| {
            let k = index % n_values;
            index /= n_values;
            k
        })
        .collect()
}

/// Per-chain marginals of a joint distribution.
pub fn marginalize(joint: &[f64], n_chains: usize, n_values: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; n_values]; n_chains];
    for (i, &p) in joint.iter().enumerate() {
        for (m, k) in decode_joint(i, n_chains, n_values).into_iter().enumerate() {
            out[m][k] += p;
        }
    }
    out
}

/// Exact single-chain model over the `K^M` joint states.
pub fn flatten_to_hmm(model: &FactorialHmm, cap: usize) -> Result<GaussianHmm, FhmmError> {
    let (m, k) = (model.n_chains(), model.n_values());
    let states = k.checked_pow(m as u32).filter(|&s| s <= cap).ok_or(FhmmError::CapExceeded {
        states: k.saturating_pow(m as u32),
        cap,
    })?;
    let means: Vec<DVector<f64>> = (0..states).map(|i| model.joint_mean(&decode_joint(i, m, k))).collect();
    let initial: Vec<f64> = (0..states)
        .map(|i| decode_joint(i, m, k).iter().enumerate().map(|(c, &v)| model.initials[c][v]).product())
        .collect();
    let total: f64 = initial.iter().sum();
    let initial = initial.into_iter().map(|p| p / total).collect();
    let transition = if m == 1 { Transition::sparse(model.transitions[0].clone()) } else { Transition::kronecker(model.transitions.clone()) };
    Ok(GaussianHmm::new(transition, means, vec![model.obs_cov.clone(); states], initial)?)
}

#[derive(Debug, Clone, Copy)]
pub struct SmfOptions {
    pub n_sweeps: usize,
    /// Stop once a sweep improves the bound by less than this.
    pub tol: f64,
}

impl Default for SmfOptions {
    fn default() -> Self {
        Self { n_sweeps: 10, tol: 1e-6 }
    }
}

/// Variational posterior: every chain is an independent HMM.
#[derive(Debug, Clone)]
pub struct ChainMarginals {
    /// `marginals[m][t][k] = Q(x_t^(m) = k)`.
    pub marginals: Vec<Vec<Vec<f64>>>,
    /// Expected transition counts per chain, on the law's sparsity pattern.
    pub transition_counts: Vec<CsrMatrix>,
    /// Variational bound after each sweep (preceded by its value at the
    /// prior when not warm-started).
    pub bound_trace: Vec<f64>,
    pub sweeps: usize,
}

impl ChainMarginals {
    pub fn len(&self) -> usize {
        self.marginals[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-chain marginals at step `t`.
    pub fn at(&self, t: usize) -> Vec<Vec<f64>> {
        self.marginals.iter().map(|chain| chain[t].clone()).collect()
    }

    pub fn last(&self) -> Vec<Vec<f64>> {
        self.at(self.len() - 1)
    }

    pub fn bound(&self) -> f64 {
        *self.bound_trace.last().expect("at least one bound evaluation")
    }
}

/// Quantities shared by every chain update.
struct Precomputed {
    /// `W^(m)ᵀ Σ⁻¹`, `K × D`.
    proj: Vec<DMatrix<f64>>,
    /// `½ w_kᵀ Σ⁻¹ w_k`.
    half_norms: Vec<Vec<f64>>,
    sigma_inv: DMatrix<f64>,
    log_norm: f64,
}

impl Precomputed {
    fn new(model: &FactorialHmm) -> Self {
        let chol = Cholesky::new(model.obs_cov.clone()).expect("validated covariance");
        let sigma_inv = chol.inverse();
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let proj: Vec<DMatrix<f64>> = model.weights.iter().map(|w| w.transpose() * &sigma_inv).collect();
        let half_norms = model
            .weights
            .iter()
            .zip(&proj)
            .map(|(w, p)| (0..w.ncols()).map(|k| 0.5 * p.row(k).dot(&w.column(k).transpose())).collect())
            .collect();
        let d = model.dim() as f64;
        Self { proj, half_norms, sigma_inv, log_norm: -0.5 * (d * (2.0 * PI).ln() + log_det) }
    }
}

fn validate_laws(model: &FactorialHmm, laws: &[CsrMatrix]) -> Result<(), FhmmError> {
    let k = model.n_values();
    if laws.len() != model.n_chains() || laws.iter().any(|l| l.n_rows != k || l.n_cols != k) {
        return Err(FhmmError::InvalidData(format!("expected {} {k}x{k} transition laws", model.n_chains())));
    }
    Ok(())
}

fn validate_obs(model: &FactorialHmm, obs: &[DVector<f64>]) -> Result<(), FhmmError> {
    if obs.is_empty() {
        return Err(FhmmError::InvalidData("empty observation sequence".into()));
    }
    let d = model.dim();
    if obs.iter().any(|y| y.len() != d || y.iter().any(|v| !v.is_finite())) {
        return Err(FhmmError::InvalidData(format!("observations must be finite {d}-vectors")));
    }
    Ok(())
}

/// Structured mean field over `observations` with chain dynamics `laws` and
/// the model's initial distributions.
pub fn smf_estep(
    model: &FactorialHmm,
    observations: &[DVector<f64>],
    laws: &[CsrMatrix],
    opts: SmfOptions,
) -> Result<ChainMarginals, FhmmError> {
    validate_obs(model, observations)?;
    validate_laws(model, laws)?;
    smf_core(model, &Precomputed::new(model), observations, laws, &model.initials, opts, None)
}

fn smf_core(
    model: &FactorialHmm,
    pre: &Precomputed,
    obs: &[DVector<f64>],
    laws: &[CsrMatrix],
    initials: &[Vec<f64>],
    opts: SmfOptions,
    warm: Option<&[Vec<Vec<f64>>]>,
) -> Result<ChainMarginals, FhmmError> {
    let (n_chains, k, t_len, d) = (model.n_chains(), model.n_values(), obs.len(), model.dim());

    let mut marginals: Vec<Vec<Vec<f64>>> = match warm {
        Some(w) => w.to_vec(),
        None => (0..n_chains)
            .map(|m| {
                let mut chain = Vec::with_capacity(t_len);
                chain.push(initials[m].clone());
                for t in 1..t_len {
                    let next = laws[m].tr_mul_vec(&chain[t - 1]);
                    chain.push(next);
                }
                chain
            })
            .collect(),
    };
    // chain_means[m][t] = W^(m) ⟨x_t^(m)⟩; total[t] = Σ_m chain_means[m][t]
    let mut chain_means: Vec<Vec<DVector<f64>>> = (0..n_chains)
        .map(|m| marginals[m].iter().map(|g| &model.weights[m] * DVector::from_column_slice(g)).collect())
        .collect();
    let mut total: Vec<DVector<f64>> =
        (0..t_len).map(|t| (0..n_chains).fold(DVector::zeros(d), |acc, m| acc + &chain_means[m][t])).collect();
    // (log Z_m, Σ_t ⟨x_t⟩·log h_t) of each chain's current factor
    let mut chain_terms = vec![(0.0, 0.0); n_chains];
    let mut counts: Vec<CsrMatrix> = laws
        .iter()
        .map(|l| {
            let mut c = l.clone();
            c.values.iter_mut().for_each(|v| *v = 0.0);
            c
        })
        .collect();

    let mut trace = Vec::new();
    if warm.is_none() {
        trace.push(bound(model, pre, obs, &marginals, &chain_means, &total, &chain_terms));
    }
    let mut sweeps = 0;
    let mut table = vec![0.0; t_len * k];
    let mut residual = DVector::<f64>::zeros(d);
    while sweeps < opts.n_sweeps {
        sweeps += 1;
        for m in 0..n_chains {
            for t in 0..t_len {
                residual.copy_from(&obs[t]);
                residual -= &total[t];
                residual += &chain_means[m][t];
                let lh = &pre.proj[m] * &residual;
                for v in 0..k {
                    table[t * k + v] = lh[v] - pre.half_norms[m][v];
                }
            }
            let post = forward_backward_table(&laws[m], &initials[m], &table, t_len)?;
            let expected_log_h: f64 = post
                .gamma
                .iter()
                .enumerate()
                .map(|(t, g)| g.iter().zip(&table[t * k..(t + 1) * k]).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            chain_terms[m] = (post.log_likelihood, expected_log_h);
            for t in 0..t_len {
                let new_mean = &model.weights[m] * DVector::from_column_slice(&post.gamma[t]);
                total[t] -= &chain_means[m][t];
                total[t] += &new_mean;
                chain_means[m][t] = new_mean;
            }
            marginals[m] = post.gamma;
            counts[m] = post.transition_counts;
        }
        let f = bound(model, pre, obs, &marginals, &chain_means, &total, &chain_terms);
        let prev = trace.last().copied();
        trace.push(f);
        if let Some(prev) = prev {
            let drop = prev - f;
            if drop > 1e-8 * prev.abs().max(1.0) {
                return Err(FhmmError::BoundDecrease { sweep: sweeps, drop });
            }
            if f - prev < opts.tol {
                break;
            }
        }
    }
    Ok(ChainMarginals { marginals, transition_counts: counts, bound_trace: trace, sweeps })
}

/// `Σ_m [log Z_m − Σ_t ⟨x_t⟩·log h_t] + Σ_t E_Q[log N(y_t; Σ_m W^(m) x_t^(m), Σ)]`.
fn bound(
    model: &FactorialHmm,
    pre: &Precomputed,
    obs: &[DVector<f64>],
    marginals: &[Vec<Vec<f64>>],
    chain_means: &[Vec<DVector<f64>>],
    total: &[DVector<f64>],
    chain_terms: &[(f64, f64)],
) -> f64 {
    let mut f: f64 = chain_terms.iter().map(|(log_z, elh)| log_z - elh).sum();
    for t in 0..obs.len() {
        let diff = &obs[t] - &total[t];
        let mut quad = diff.dot(&(&pre.sigma_inv * &diff));
        for m in 0..model.n_chains() {
            let g = &marginals[m][t];
            let second: f64 = g.iter().zip(&pre.half_norms[m]).map(|(a, b)| 2.0 * a * b).sum();
            let mu = &chain_means[m][t];
            quad += second - mu.dot(&(&pre.sigma_inv * mu));
        }
        f += pre.log_norm - 0.5 * quad;
    }
    f
}

/// Where a filtering window starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Anchor {
    /// Distribution of the first window state itself.
    Prior(Vec<Vec<f64>>),
    /// Factored posterior one step before the window; propagated through
    /// the transition laws to give the first window state's prior.
    Marginals(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct WindowResult {
    /// `u^(m)(x_t^(m) | y_{1:t})` at the last window step.
    pub marginals: Vec<Vec<f64>>,
    /// Anchor for the next window, one step later: the factored filtered
    /// estimate at the first window step.
    pub next_anchor: Anchor,
    pub bound: f64,
    pub sweeps: usize,
}

/// Structured mean field over the last `H` observations from a fixed
/// factored anchor; no smoothing reaches back across the anchor.
pub fn windowed_filter(
    model: &FactorialHmm,
    laws: &[CsrMatrix],
    anchor: &Anchor,
    window: &[DVector<f64>],
    opts: SmfOptions,
) -> Result<WindowResult, FhmmError> {
    validate_obs(model, window)?;
    validate_laws(model, laws)?;
    let initials: Vec<Vec<f64>> = match anchor {
        Anchor::Prior(p) => p.clone(),
        Anchor::Marginals(p) => p.iter().zip(laws).map(|(q, l)| l.tr_mul_vec(q)).collect(),
    };
    if initials.len() != model.n_chains()
        || initials.iter().any(|p| p.len() != model.n_values() || crate::hmm::check_distribution(p, 1e-9).is_err())
    {
        return Err(FhmmError::InvalidData("anchor is not a set of per-chain distributions".into()));
    }
    let pre = Precomputed::new(model);
    let post = smf_core(model, &pre, window, laws, &initials, opts, None)?;
    // The next anchor is the filtered estimate at the first window step, so
    // later windows never reuse observations already folded into it.
    let first = if window.len() == 1 { post.last() } else { smf_core(model, &pre, &window[..1], laws, &initials, opts, None)?.last() };
    Ok(WindowResult {
        marginals: post.last(),
        next_anchor: Anchor::Marginals(first),
        bound: post.bound(),
        sweeps: post.sweeps,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct FhmmEmOptions {
    pub max_iter: usize,
    /// Stop once `(F_new − F_old) < tol · max(1, |F_old|)`.
    pub tol: f64,
    pub learn_weights: bool,
    pub learn_covariance: bool,
    pub smf: SmfOptions,
    /// Eigenvalue floor for `Σ`; `None` derives it from the data.
    pub covariance_floor: Option<f64>,
}

impl Default for FhmmEmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            learn_weights: true,
            learn_covariance: true,
            smf: SmfOptions::default(),
            covariance_floor: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FhmmEmReport {
    /// Variational bound at the end of every E-step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub floor_hits: usize,
}

/// Variational EM. Each E-step is warm-started from the previous
/// marginals, so the recorded bound never decreases.
pub fn em_fit(
    sequences: &[Vec<DVector<f64>>],
    init: &FactorialHmm,
    opts: FhmmEmOptions,
) -> Result<(FactorialHmm, FhmmEmReport), FhmmError> {
    if sequences.is_empty() {
        return Err(FhmmError::InvalidData("no sequences".into()));
    }
    for s in sequences {
        validate_obs(init, s)?;
    }
    let floor = match opts.covariance_floor {
        Some(f) => f,
        None => covariance_floor(&sequences.iter().flatten().cloned().collect::<Vec<_>>()),
    };
    let mut model = init.clone();
    let mut previous: Option<Vec<ChainMarginals>> = None;
    let mut trace = Vec::new();
    let mut floor_hits = 0;
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let pre = Precomputed::new(&model);
        let mut posts = Vec::with_capacity(sequences.len());
        let mut f = 0.0;
        for (i, seq) in sequences.iter().enumerate() {
            let warm = previous.as_ref().map(|p| p[i].marginals.as_slice());
            let post = smf_core(&model, &pre, seq, &model.transitions, &model.initials, opts.smf, warm)?;
            f += post.bound();
            posts.push(post);
        }
        if let Some(&prev) = trace.last() {
            let gain: f64 = f - prev;
            if gain < -1e-8 * f64::max(1.0, f64::abs(prev)) {
                warn!("variational bound decreased by {}", -gain);
            }
            if gain < opts.tol * f64::max(1.0, f64::abs(prev)) {
                converged = true;
            }
        }
        trace.push(f);
        debug!("FHMM EM iteration {iterations}: bound {f}");
        if converged || iterations >= opts.max_iter {
            break;
        }
        let (next, hits) = m_step(&model, sequences, &posts, floor, opts)?;
        floor_hits += hits;
        model = next;
        previous = Some(posts);
        iterations += 1;
    }
    Ok((model, FhmmEmReport { trace, iterations, converged, floor_hits }))
}

fn m_step(
    model: &FactorialHmm,
    sequences: &[Vec<DVector<f64>>],
    posts: &[ChainMarginals],
    floor: f64,
    opts: FhmmEmOptions,
) -> Result<(FactorialHmm, usize), FhmmError> {
    let (n_chains, k, d) = (model.n_chains(), model.n_values(), model.dim());

    let mut initials = vec![vec![0.0; k]; n_chains];
    let mut transitions = Vec::with_capacity(n_chains);
    for m in 0..n_chains {
        for post in posts {
            for (a, g) in initials[m].iter_mut().zip(&post.marginals[m][0]) {
                *a += g;
            }
        }
        let s: f64 = initials[m].iter().sum();
        initials[m].iter_mut().for_each(|a| *a /= s);

        let old = &model.transitions[m];
        let mut counts = vec![0.0; old.nnz()];
        for post in posts {
            for (c, v) in counts.iter_mut().zip(&post.transition_counts[m].values) {
                *c += v;
            }
        }
        let rows = (0..k)
            .map(|i| {
                let range = old.indptr[i]..old.indptr[i + 1];
                let s: f64 = counts[range.clone()].iter().sum();
                if s > 0.0 && s.is_finite() {
                    range.map(|idx| (old.indices[idx], counts[idx] / s)).collect()
                } else {
                    old.row(i).collect()
                }
            })
            .collect();
        transitions.push(CsrMatrix::from_rows(k, rows));
    }

    let mk = n_chains * k;
    let t_total: usize = sequences.iter().map(|s| s.len()).sum();
    let weights = if opts.learn_weights {
        // W = (Σ_t y_t ⟨x_t⟩ᵀ)(Σ_t ⟨x_t x_tᵀ⟩)⁺ over the stacked 1-of-K vectors
        let mut xs = DMatrix::<f64>::zeros(t_total, mk);
        let mut ys = DMatrix::<f64>::zeros(t_total, d);
        let mut within = DMatrix::<f64>::zeros(mk, mk);
        let mut row = 0;
        for (seq, post) in sequences.iter().zip(posts) {
            for (t, y) in seq.iter().enumerate() {
                ys.row_mut(row).copy_from(&y.transpose());
                for m in 0..n_chains {
                    for v in 0..k {
                        let g = post.marginals[m][t][v];
                        xs[(row, m * k + v)] = g;
                        within[(m * k + v, m * k + v)] += g;
                    }
                }
                row += 1;
            }
        }
        let mut second = xs.transpose() * &xs;
        for m in 0..n_chains {
            // replace the within-chain block Σ γγᵀ by Σ diag γ
            for a in 0..k {
                for b in 0..k {
                    second[(m * k + a, m * k + b)] = within[(m * k + a, m * k + b)];
                }
            }
        }
        let cross = ys.transpose() * &xs;
        let svd = second.clone().svd(true, true);
        let eps = 1e-10 * svd.singular_values.max();
        let pinv = svd.pseudo_inverse(eps).map_err(|e| FhmmError::InvalidModel(e.to_string()))?;
        let w = cross * pinv;
        (0..n_chains).map(|m| w.columns(m * k, k).into_owned()).collect()
    } else {
        model.weights.clone()
    };

    let mut hits = 0;
    let obs_cov = if opts.learn_covariance {
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for (seq, post) in sequences.iter().zip(posts) {
            for (t, y) in seq.iter().enumerate() {
                let mut resid = y.clone();
                for m in 0..n_chains {
                    let g = DVector::from_column_slice(&post.marginals[m][t]);
                    let mu = &weights[m] * &g;
                    resid -= &mu;
                    // W (diag γ − γγᵀ) Wᵀ
                    for v in 0..k {
                        if g[v] > 0.0 {
                            let col = weights[m].column(v);
                            cov.ger(g[v], &col, &col, 1.0);
                        }
                    }
                    cov.ger(-1.0, &mu, &mu, 1.0);
                }
                cov.ger(1.0, &resid, &resid, 1.0);
            }
        }
        cov /= t_total as f64;
        if apply_covariance_floor(&mut cov, floor) {
            hits += 1;
        }
        cov
    } else {
        model.obs_cov.clone()
    };
    Ok((FactorialHmm::new(transitions, weights, obs_cov, initials)?, hits))
}
