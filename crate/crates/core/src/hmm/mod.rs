//! Gaussian-emission hidden Markov models: k-means initialization,
//! Baum-Welch learning, and forward filtering under an arbitrary latent
//! transition law.

mod em;
mod kmeans;

pub use em::{em_fit, forward_backward, EmOptions, EmReport, Posterior};
pub use kmeans::{covariance_floor, init_from_kmeans, kmeans_init, InitOptions, KmeansResult};

pub(crate) use em::forward_backward_table;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{dmatrix_vec, dvector_vec};
use crate::klcore::{Transition, STOCHASTIC_TOL};
use crate::linalg::Gaussian;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HmmError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("k-means left a cluster empty after {retries} re-seeds ({distinct} distinct points for {requested} clusters)")]
    EmptyCluster { retries: usize, distinct: usize, requested: usize },
    #[error("forward recursion underflowed at step {step}")]
    NumericalUnderflow { step: usize },
    #[error("observation has zero likelihood under every predicted state (max log-density {max_log_density})")]
    ZeroLikelihood { max_log_density: f64 },
}

/// HMM with full-covariance Gaussian emissions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GaussianHmmRecord", into = "GaussianHmmRecord")]
pub struct GaussianHmm {
    transition: Transition,
    initial: Vec<f64>,
    emissions: Vec<Gaussian>,
}

#[derive(Serialize, Deserialize)]
struct GaussianHmmRecord {
    n_states: usize,
    dim: usize,
    transition: Transition,
    initial: Vec<f64>,
    #[serde(with = "dvector_vec")]
    means: Vec<DVector<f64>>,
    #[serde(with = "dmatrix_vec")]
    covariances: Vec<DMatrix<f64>>,
}

impl TryFrom<GaussianHmmRecord> for GaussianHmm {
    type Error = HmmError;
    fn try_from(r: GaussianHmmRecord) -> Result<Self, HmmError> {
        let m = GaussianHmm::new(r.transition, r.means, r.covariances, r.initial)?;
        if m.n_states() != r.n_states || m.dim() != r.dim {
            return Err(HmmError::InvalidModel("declared shape does not match payload".into()));
        }
        Ok(m)
    }
}

impl From<GaussianHmm> for GaussianHmmRecord {
    fn from(m: GaussianHmm) -> Self {
        GaussianHmmRecord {
            n_states: m.n_states(),
            dim: m.dim(),
            means: m.emissions.iter().map(|g| g.mean().clone()).collect(),
            covariances: m.emissions.iter().map(|g| g.cov().clone()).collect(),
            transition: m.transition,
            initial: m.initial,
        }
    }
}

impl PartialEq for GaussianHmm {
    fn eq(&self, other: &Self) -> bool {
        self.transition == other.transition
            && self.initial == other.initial
            && self.emissions.len() == other.emissions.len()
            && self.emissions.iter().zip(&other.emissions).all(|(a, b)| a.mean() == b.mean() && a.cov() == b.cov())
    }
}

impl GaussianHmm {
    pub fn new(
        transition: Transition,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
        initial: Vec<f64>,
    ) -> Result<Self, HmmError> {
        let n = transition.n_states();
        if n == 0 {
            return Err(HmmError::InvalidModel("no states".into()));
        }
        if means.len() != n || covariances.len() != n || initial.len() != n {
            return Err(HmmError::InvalidModel(format!(
                "{n} states but {} means, {} covariances, {} initial weights",
                means.len(),
                covariances.len(),
                initial.len()
            )));
        }
        transition.check_stochastic(STOCHASTIC_TOL).map_err(HmmError::InvalidModel)?;
        check_distribution(&initial, STOCHASTIC_TOL).map_err(|e| HmmError::InvalidModel(format!("initial: {e}")))?;
        let d = means[0].len();
        let mut emissions = Vec::with_capacity(n);
        for (k, (mu, cov)) in means.into_iter().zip(covariances).enumerate() {
            if mu.len() != d {
                return Err(HmmError::InvalidModel(format!("mean {k} has dimension {}, expected {d}", mu.len())));
            }
            if (&cov - cov.transpose()).abs().max() > 1e-9 * cov.abs().max().max(1.0) {
                return Err(HmmError::InvalidModel(format!("covariance {k} is not symmetric")));
            }
            let g = Gaussian::new(mu, cov)
                .ok_or_else(|| HmmError::InvalidModel(format!("covariance {k} is not positive definite")))?;
            emissions.push(g);
        }
        Ok(Self { transition, initial, emissions })
    }

    pub fn n_states(&self) -> usize {
        self.emissions.len()
    }

    pub fn dim(&self) -> usize {
        self.emissions[0].mean().len()
    }

    pub fn transition(&self) -> &Transition {
        &self.transition
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn mean(&self, k: usize) -> &DVector<f64> {
        self.emissions[k].mean()
    }

    pub fn covariance(&self, k: usize) -> &DMatrix<f64> {
        self.emissions[k].cov()
    }

    pub fn emission(&self, k: usize) -> &Gaussian {
        &self.emissions[k]
    }

    /// Log emission densities of `y` under every state.
    pub fn log_likelihoods(&self, y: &DVector<f64>) -> Vec<f64> {
        self.emissions.iter().map(|g| g.log_density(y)).collect()
    }

    pub fn with_transition(&self, transition: Transition) -> Result<Self, HmmError> {
        if transition.n_states() != self.n_states() {
            return Err(HmmError::InvalidModel("transition size mismatch".into()));
        }
        transition.check_stochastic(STOCHASTIC_TOL).map_err(HmmError::InvalidModel)?;
        Ok(Self { transition, initial: self.initial.clone(), emissions: self.emissions.clone() })
    }

    pub fn with_initial(&self, initial: Vec<f64>) -> Result<Self, HmmError> {
        if initial.len() != self.n_states() {
            return Err(HmmError::InvalidModel("initial size mismatch".into()));
        }
        check_distribution(&initial, STOCHASTIC_TOL).map_err(|e| HmmError::InvalidModel(format!("initial: {e}")))?;
        Ok(Self { transition: self.transition.clone(), initial, emissions: self.emissions.clone() })
    }

    /// Same model with a uniform initial distribution.
    pub fn with_uniform_initial(&self) -> Self {
        let n = self.n_states();
        Self { transition: self.transition.clone(), initial: vec![1.0 / n as f64; n], emissions: self.emissions.clone() }
    }
}

pub(crate) fn check_distribution(p: &[f64], tol: f64) -> Result<(), String> {
    if let Some(i) = p.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(format!("entry {i} = {} is negative or not finite", p[i]));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(format!("sums to {s}"));
    }
    Ok(())
}

/// Filtered posterior over latent states plus the running log evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub weights: Vec<f64>,
    pub log_evidence: f64,
}

impl FilterState {
    pub fn from_weights(weights: Vec<f64>) -> Self {
        Self { weights, log_evidence: 0.0 }
    }
}

/// Posterior after the first observation: `initial × likelihood`.
pub fn filter_init(model: &GaussianHmm, observation: &DVector<f64>) -> Result<FilterState, HmmError> {
    filter_from_prior(model, model.initial.clone(), observation)
}

/// Conditions an arbitrary prior over states on one observation.
pub fn filter_from_prior(model: &GaussianHmm, prior: Vec<f64>, observation: &DVector<f64>) -> Result<FilterState, HmmError> {
    if prior.len() != model.n_states() {
        return Err(HmmError::InvalidModel(format!("prior has {} entries, expected {}", prior.len(), model.n_states())));
    }
    let ll = model.log_likelihoods(observation);
    let mut state = FilterState { weights: prior, log_evidence: 0.0 };
    bayes_update(&mut state, &ll)?;
    Ok(state)
}

/// One step of `u(x_t|y_{1:t}) ∝ p(y_t|x_t) Σ law(x_t|x_{t−1}) u(x_{t−1}|y_{1:t−1})`.
pub fn filter_step(
    model: &GaussianHmm,
    prior: &FilterState,
    transition_law: &Transition,
    observation: &DVector<f64>,
) -> Result<FilterState, HmmError> {
    let ll = model.log_likelihoods(observation);
    filter_step_loglik(prior, transition_law, &ll)
}

/// [`filter_step`] with precomputed log emission densities.
pub fn filter_step_loglik(
    prior: &FilterState,
    transition_law: &Transition,
    log_likelihoods: &[f64],
) -> Result<FilterState, HmmError> {
    let predicted = transition_law.propagate(&prior.weights);
    let mut state = FilterState { weights: predicted, log_evidence: prior.log_evidence };
    bayes_update(&mut state, log_likelihoods)?;
    Ok(state)
}

fn bayes_update(state: &mut FilterState, ll: &[f64]) -> Result<(), HmmError> {
    let m = state
        .weights
        .iter()
        .zip(ll)
        .filter(|(w, _)| **w > 0.0)
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        let max_log_density = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Err(HmmError::ZeroLikelihood { max_log_density });
    }
    let mut s = 0.0;
    for (w, l) in state.weights.iter_mut().zip(ll) {
        *w *= (l - m).exp();
        s += *w;
    }
    if !(s > 0.0) || !s.is_finite() {
        let max_log_density = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Err(HmmError::ZeroLikelihood { max_log_density });
    }
    state.weights.iter_mut().for_each(|w| *w /= s);
    state.log_evidence += s.ln() + m;
    Ok(())
}

/// One-step predictive distribution over latent states.
pub fn predict_latent(filtered: &FilterState, transition_law: &Transition) -> Vec<f64> {
    transition_law.propagate(&filtered.weights)
}

/// Mean of the one-step predictive observation mixture under `transition_law`.
pub fn predictive_mean(model: &GaussianHmm, filtered: &FilterState, transition_law: &Transition) -> DVector<f64> {
    let next = predict_latent(filtered, transition_law);
    let mut out = DVector::zeros(model.dim());
    for (k, w) in next.iter().enumerate() {
        if *w != 0.0 {
            out.axpy(*w, model.mean(k), 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_state(sep: f64) -> GaussianHmm {
        GaussianHmm::new(
            Transition::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]),
            vec![DVector::from_element(1, -sep), DVector::from_element(1, sep)],
            vec![DMatrix::from_element(1, 1, 1.0); 2],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn single_state_posterior_is_one() {
        let m = GaussianHmm::new(
            Transition::from_rows(&[vec![1.0]]),
            vec![DVector::zeros(2)],
            vec![DMatrix::identity(2, 2)],
            vec![1.0],
        )
        .unwrap();
        let mut f = filter_init(&m, &DVector::from_vec(vec![3.0, -1.0])).unwrap();
        for y in [1.0, 50.0, -7.0] {
            f = filter_step(&m, &f, m.transition(), &DVector::from_vec(vec![y, y])).unwrap();
            assert_eq!(f.weights, vec![1.0]);
        }
    }

    #[test]
    fn far_observation_pins_the_state() {
        let m = two_state(5.0);
        let prior = FilterState::from_weights(vec![0.5, 0.5]);
        let f = filter_step(&m, &prior, m.transition(), &DVector::from_element(1, -5.0)).unwrap();
        // closed-form two-state Bayes update
        let pred = [0.5 * 0.9 + 0.5 * 0.2, 0.5 * 0.1 + 0.5 * 0.8];
        let l0 = (-0.5f64 * 0.0).exp();
        let l1 = (-0.5f64 * 100.0).exp();
        let post0 = pred[0] * l0 / (pred[0] * l0 + pred[1] * l1);
        assert!((f.weights[0] - post0).abs() < 1e-12);
        assert!((f.weights[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_emissions_only_propagate() {
        let m = GaussianHmm::new(
            Transition::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6]]),
            vec![DVector::zeros(1); 2],
            vec![DMatrix::identity(1, 1); 2],
            vec![0.5, 0.5],
        )
        .unwrap();
        let law = Transition::from_rows(&[vec![0.1, 0.9], vec![0.6, 0.4]]);
        let f = filter_step(&m, &FilterState::from_weights(vec![0.5, 0.5]), &law, &DVector::from_element(1, 2.0)).unwrap();
        assert!((f.weights[0] - 0.35).abs() < 1e-15);
        assert!((f.weights[1] - 0.65).abs() < 1e-15);
    }

    #[test]
    fn zero_likelihood_is_reported() {
        let m = GaussianHmm::new(
            Transition::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            vec![DVector::zeros(1), DVector::from_element(1, 1.0)],
            vec![DMatrix::identity(1, 1); 2],
            vec![1.0, 0.0],
        )
        .unwrap();
        let prior = FilterState::from_weights(vec![0.0, 0.0]);
        assert!(matches!(
            filter_step(&m, &prior, m.transition(), &DVector::zeros(1)),
            Err(HmmError::ZeroLikelihood { .. })
        ));
    }

    #[test]
    fn predictive_mean_is_mixture_mean() {
        let m = two_state(1.0);
        let law = Transition::from_rows(&[vec![0.25, 0.75], vec![0.5, 0.5]]);
        let ybar = predictive_mean(&m, &FilterState::from_weights(vec![1.0, 0.0]), &law);
        assert!((ybar[0] - (0.25 * -1.0 + 0.75 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn constructor_validates() {
        let t = Transition::from_rows(&[vec![1.0]]);
        let bad_cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(GaussianHmm::new(t.clone(), vec![DVector::zeros(2)], vec![bad_cov], vec![1.0]).is_err());
        assert!(GaussianHmm::new(t, vec![DVector::zeros(2)], vec![DMatrix::identity(2, 2)], vec![0.5]).is_err());
    }

    #[test]
    fn model_round_trips() {
        let m = two_state(2.0);
        let text = crate::format::to_json("gaussian_hmm", &m).unwrap();
        let back: GaussianHmm = crate::format::from_json("gaussian_hmm", &text).unwrap();
        assert_eq!(back, m);
    }
}
