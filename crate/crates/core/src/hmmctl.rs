//! Latent KL control for a learned Gaussian HMM: the state cost induced by
//! a quadratic observation cost, and the observed-space control loop.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{dmatrix, dvector};
use crate::hmm::{filter_from_prior, filter_init, filter_step, predict_latent, predictive_mean, FilterState, GaussianHmm, HmmError};
use crate::klcore::{solve_power_iteration, KlError, KlProblem, KlSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("covariance is singular or not symmetric positive definite")]
    SingularCovariance,
    #[error("invalid cost: {0}")]
    InvalidCost(String),
    #[error("gain is {rows}x{cols}, expected d x {dim}")]
    GainShape { rows: usize, cols: usize, dim: usize },
    #[error(transparent)]
    Kl(#[from] KlError),
    #[error(transparent)]
    Hmm(#[from] HmmError),
}

/// `α q̃(y)` with `q̃(y) = ½ (y − μ_q)ᵀ Σ_q⁻¹ (y − μ_q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuadraticCostRecord", into = "QuadraticCostRecord")]
pub struct QuadraticCost {
    target: DVector<f64>,
    weight: DMatrix<f64>,
    /// `Σ_q`, cached.
    cov: DMatrix<f64>,
    scale: f64,
}

#[derive(Serialize, Deserialize)]
struct QuadraticCostRecord {
    #[serde(with = "dvector")]
    target: DVector<f64>,
    #[serde(with = "dmatrix")]
    weight_inverse_cov: DMatrix<f64>,
    scale: f64,
}

impl TryFrom<QuadraticCostRecord> for QuadraticCost {
    type Error = ControlError;
    fn try_from(r: QuadraticCostRecord) -> Result<Self, ControlError> {
        QuadraticCost::new(r.target, r.weight_inverse_cov, r.scale)
    }
}

impl From<QuadraticCost> for QuadraticCostRecord {
    fn from(c: QuadraticCost) -> Self {
        QuadraticCostRecord { target: c.target, weight_inverse_cov: c.weight, scale: c.scale }
    }
}

impl QuadraticCost {
    /// `weight` is `Σ_q⁻¹`.
    pub fn new(target: DVector<f64>, weight: DMatrix<f64>, scale: f64) -> Result<Self, ControlError> {
        let d = target.len();
        if weight.shape() != (d, d) {
            return Err(ControlError::InvalidCost(format!("weight is {:?}, expected {d}x{d}", weight.shape())));
        }
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(ControlError::InvalidCost(format!("scale {scale} must be finite and nonnegative")));
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(ControlError::InvalidCost("target must be finite".into()));
        }
        let cov = spd_inverse(&weight)?;
        Ok(Self { target, weight, cov, scale })
    }

    /// Cost from the target covariance `Σ_q` rather than its inverse.
    pub fn from_covariance(target: DVector<f64>, cov: DMatrix<f64>, scale: f64) -> Result<Self, ControlError> {
        let weight = spd_inverse(&cov)?;
        Self::new(target, weight, scale)
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn with_scale(&self, scale: f64) -> Result<Self, ControlError> {
        Self::new(self.target.clone(), self.weight.clone(), scale)
    }

    /// Unscaled `q̃(y)`.
    pub fn shape(&self, y: &DVector<f64>) -> f64 {
        let diff = y - &self.target;
        0.5 * diff.dot(&(&self.weight * &diff))
    }

    /// `α q̃(y)`.
    pub fn evaluate(&self, y: &DVector<f64>) -> f64 {
        self.scale * self.shape(y)
    }
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, ControlError> {
    if !m.is_square() || (m - m.transpose()).abs().max() > 1e-9 * m.abs().max().max(1.0) {
        return Err(ControlError::SingularCovariance);
    }
    let chol = Cholesky::new(m.clone()).ok_or(ControlError::SingularCovariance)?;
    let inv = chol.inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(ControlError::SingularCovariance);
    }
    Ok(inv)
}

/// `q(x) = −ln ∫ exp(−α q̃(y)) N(y; μ_x, Σ_x) dy`.
///
/// Evaluated as `½ ln|Σ_q + αΣ_x| − ½ ln|Σ_q| + ½ α dᵀ(Σ_q + αΣ_x)⁻¹ d` with
/// `d = μ_q − μ_x`, which stays finite as `α → 0`; `α = 0` returns 0.
pub fn latent_cost(cost: &QuadraticCost, state_mean: &DVector<f64>, state_cov: &DMatrix<f64>) -> Result<f64, ControlError> {
    let dim = cost.target.len();
    if state_mean.len() != dim || state_cov.shape() != (dim, dim) {
        return Err(ControlError::InvalidCost("state moments do not match the cost dimension".into()));
    }
    if Cholesky::new(state_cov.clone()).is_none() {
        return Err(ControlError::SingularCovariance);
    }
    let alpha = cost.scale;
    if alpha == 0.0 {
        return Ok(0.0);
    }
    let mixed = &cost.cov + state_cov * alpha;
    let chol_mixed = Cholesky::new(mixed).ok_or(ControlError::SingularCovariance)?;
    let chol_q = Cholesky::new(cost.cov.clone()).ok_or(ControlError::SingularCovariance)?;
    let log_det = |c: &Cholesky<f64, nalgebra::Dyn>| 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let diff = &cost.target - state_mean;
    let solved = chol_mixed.solve(&diff);
    let q = 0.5 * (log_det(&chol_mixed) - log_det(&chol_q)) + 0.5 * alpha * diff.dot(&solved);
    Ok(q.max(0.0))
}

/// Latent KL problem with `P` the HMM transition and the state cost of every
/// emission under `cost`. `α` is already inside the integral, so the
/// problem's own cost scale is 1.
pub fn build_latent_problem(model: &GaussianHmm, cost: &QuadraticCost) -> Result<KlProblem, ControlError> {
    let costs = (0..model.n_states())
        .map(|k| latent_cost(cost, model.mean(k), model.covariance(k)))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(KlProblem::new(model.transition().clone(), costs, 1.0)?)
}

/// Observed-space controller: `τ_t = K (ȳ^u_{t+1|1:t} − ȳ^p_{t+1|1:t})`.
///
/// Both predictive means are taken from the filter that runs under `u*`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HmmController {
    model: GaussianHmm,
    /// `None` when the latent problem came from another cost model.
    cost: Option<QuadraticCost>,
    solution: KlSolution,
    #[serde(with = "dmatrix")]
    gain: DMatrix<f64>,
    /// Period of each observation dimension, 0 for non-periodic ones.
    #[serde(default)]
    periods: Vec<f64>,
    filter: Option<FilterState>,
    #[serde(default)]
    filter_resets: usize,
}

impl HmmController {
    /// Solves the latent problem for `model` and `cost` to tolerance `tol`.
    pub fn build(
        model: GaussianHmm,
        cost: QuadraticCost,
        gain: DMatrix<f64>,
        tol: f64,
        max_iter: usize,
    ) -> Result<Self, ControlError> {
        let problem = build_latent_problem(&model, &cost)?;
        let solution = solve_power_iteration(&problem, tol, max_iter)?;
        let mut ctl = Self::from_solution(model, solution, gain)?;
        ctl.cost = Some(cost);
        Ok(ctl)
    }

    /// Controller for an already solved latent problem on `model`.
    pub fn from_solution(model: GaussianHmm, solution: KlSolution, gain: DMatrix<f64>) -> Result<Self, ControlError> {
        if gain.ncols() != model.dim() {
            return Err(ControlError::GainShape { rows: gain.nrows(), cols: gain.ncols(), dim: model.dim() });
        }
        if solution.desirability.len() != model.n_states() {
            return Err(ControlError::InvalidCost("solution size does not match the model".into()));
        }
        Ok(Self { model, cost: None, solution, gain, periods: Vec::new(), filter: None, filter_resets: 0 })
    }

    /// Treats dimensions with a nonzero period as angles: the predictive
    /// means are then taken over the differences `μ_k − y_t` wrapped into
    /// `[−period/2, period/2)`, which leaves `ȳ^u − ȳ^p` unchanged whenever no
    /// state mean lies across the wrap from the observation.
    pub fn with_periods(mut self, periods: Vec<f64>) -> Result<Self, ControlError> {
        if periods.len() != self.model.dim() || periods.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(ControlError::InvalidCost(format!("expected {} nonnegative periods", self.model.dim())));
        }
        self.periods = if periods.iter().all(|p| *p == 0.0) { Vec::new() } else { periods };
        Ok(self)
    }

    /// Times the filter lost all support and restarted from the prior.
    pub fn filter_resets(&self) -> usize {
        self.filter_resets
    }

    pub fn periods(&self) -> &[f64] {
        &self.periods
    }

    pub fn model(&self) -> &GaussianHmm {
        &self.model
    }

    pub fn cost(&self) -> Option<&QuadraticCost> {
        self.cost.as_ref()
    }

    pub fn solution(&self) -> &KlSolution {
        &self.solution
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn filter(&self) -> Option<&FilterState> {
        self.filter.as_ref()
    }

    /// Forgets the filtered state; the next observation re-initializes it.
    pub fn reset(&mut self) {
        self.filter = None;
        self.filter_resets = 0;
    }

    /// Filters `observation` under `u*` and returns `(τ, ȳ^u, ȳ^p)`.
    pub fn step_detailed(
        &mut self,
        observation: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), ControlError> {
        let control_law = &self.solution.optimal_control;
        let next = match &self.filter {
            None => self.restart_filter(observation)?,
            Some(prev) => match filter_step(&self.model, prev, control_law, observation) {
                Err(HmmError::ZeroLikelihood { .. }) => {
                    self.filter_resets += 1;
                    self.restart_filter(observation)?
                }
                other => other?,
            },
        };
        let (y_u, y_p) = if self.periods.is_empty() {
            (predictive_mean(&self.model, &next, control_law), predictive_mean(&self.model, &next, self.model.transition()))
        } else {
            (
                self.wrapped_mean(&predict_latent(&next, control_law), observation),
                self.wrapped_mean(&predict_latent(&next, self.model.transition()), observation),
            )
        };
        self.filter = Some(next);
        let tau = &self.gain * (&y_u - &y_p);
        Ok((tau, y_u, y_p))
    }

    /// Filter from the model's initial distribution, or from a uniform prior
    /// when the observation lies outside the initial support.
    fn restart_filter(&self, observation: &DVector<f64>) -> Result<FilterState, HmmError> {
        match filter_init(&self.model, observation) {
            Err(HmmError::ZeroLikelihood { .. }) => {
                let n = self.model.n_states();
                filter_from_prior(&self.model, vec![1.0 / n as f64; n], observation)
            }
            other => other,
        }
    }

    fn wrapped_mean(&self, weights: &[f64], reference: &DVector<f64>) -> DVector<f64> {
        let mut out = reference.clone();
        for (k, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for (i, o) in out.iter_mut().enumerate() {
                let mut d = self.model.mean(k)[i] - reference[i];
                let period = self.periods[i];
                if period > 0.0 {
                    d -= period * (d / period + 0.5).floor();
                }
                *o += w * d;
            }
        }
        out
    }

    /// One control step: returns `τ`.
    pub fn control_step(&mut self, observation: &DVector<f64>) -> Result<DVector<f64>, ControlError> {
        Ok(self.step_detailed(observation)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::klcore::Transition;

    fn scalar_cost(alpha: f64) -> QuadraticCost {
        QuadraticCost::new(DVector::zeros(1), DMatrix::identity(1, 1), alpha).unwrap()
    }

    #[test]
    fn zero_scale_gives_zero_cost() {
        let c = QuadraticCost::new(DVector::from_vec(vec![1.0, -2.0]), DMatrix::identity(2, 2) * 3.0, 0.0).unwrap();
        let q = latent_cost(&c, &DVector::from_vec(vec![5.0, 5.0]), &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(q, 0.0);
    }

    #[test]
    fn unit_examples() {
        let c = scalar_cost(1.0);
        let q0 = latent_cost(&c, &DVector::zeros(1), &DMatrix::identity(1, 1)).unwrap();
        assert!((q0 - 0.5 * 2f64.ln()).abs() < 1e-15);
        let q2 = latent_cost(&c, &DVector::from_element(1, 2.0), &DMatrix::identity(1, 1)).unwrap();
        assert!((q2 - (0.5 * 2f64.ln() + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn rejects_singular_state_covariance() {
        let c = scalar_cost(1.0);
        assert_eq!(
            latent_cost(&c, &DVector::zeros(1), &DMatrix::zeros(1, 1)),
            Err(ControlError::SingularCovariance)
        );
    }

    fn toy_model(means: [f64; 2]) -> GaussianHmm {
        GaussianHmm::new(
            Transition::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]),
            vec![DVector::from_element(1, means[0]), DVector::from_element(1, means[1])],
            vec![DMatrix::identity(1, 1); 2],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn zero_scale_leaves_dynamics_uncontrolled() {
        let m = toy_model([-1.0, 1.0]);
        let mut ctl = HmmController::build(m.clone(), scalar_cost(0.0), DMatrix::from_element(1, 1, 7.0), 1e-10, 1000).unwrap();
        assert_eq!(&ctl.solution().optimal_control, m.transition());
        for y in [0.3, -4.0, 2.2, 10.0] {
            let tau = ctl.control_step(&DVector::from_element(1, y)).unwrap();
            assert_eq!(tau[0], 0.0);
        }
    }

    #[test]
    fn identical_emissions_give_constant_cost() {
        let m = toy_model([0.4, 0.4]);
        let p = build_latent_problem(&m, &scalar_cost(2.0)).unwrap();
        assert_eq!(p.state_cost()[0], p.state_cost()[1]);
        let s = solve_power_iteration(&p, 1e-10, 100).unwrap();
        assert_eq!(&s.optimal_control, m.transition());
    }

    #[test]
    fn two_state_control_matches_hand_computation() {
        // state 1 sits on the target, state 0 is far away
        let m = toy_model([5.0, 0.0]);
        let cost = scalar_cost(4.0);
        let gain = DMatrix::from_element(1, 1, 2.0);
        let mut ctl = HmmController::build(m.clone(), cost.clone(), gain, 1e-12, 10_000).unwrap();
        let (tau, y_u, y_p) = ctl.step_detailed(&DVector::from_element(1, 0.0)).unwrap();

        let q: Vec<f64> = (0..2).map(|k| latent_cost(&cost, m.mean(k), m.covariance(k)).unwrap()).collect();
        // with P = ½·11ᵀ, z ∝ G1 and u*(·|x) ∝ z regardless of x
        let w = [(-q[0]).exp(), (-q[1]).exp()];
        let u1 = w[1] / (w[0] + w[1]);
        let expected_u = (1.0 - u1) * 5.0;
        assert!((y_u[0] - expected_u).abs() < 1e-9);
        assert!((y_p[0] - 2.5).abs() < 1e-12);
        assert!((tau[0] - 2.0 * (expected_u - 2.5)).abs() < 1e-9);
        assert!(u1 > 0.99);
    }

    #[test]
    fn gain_shape_is_checked() {
        let m = toy_model([0.0, 1.0]);
        let err = HmmController::build(m, scalar_cost(1.0), DMatrix::zeros(1, 2), 1e-8, 100).unwrap_err();
        assert!(matches!(err, ControlError::GainShape { .. }));
    }

    #[test]
    fn controller_round_trips() {
        let mut ctl =
            HmmController::build(toy_model([3.0, 0.0]), scalar_cost(1.0), DMatrix::from_element(1, 1, 1.5), 1e-10, 1000).unwrap();
        ctl.control_step(&DVector::from_element(1, 1.0)).unwrap();
        let text = crate::format::to_json("hmm_controller", &ctl).unwrap();
        let mut back: HmmController = crate::format::from_json("hmm_controller", &text).unwrap();
        let y = DVector::from_element(1, 0.7);
        assert_eq!(back.control_step(&y).unwrap(), ctl.control_step(&y).unwrap());
    }

    #[test]
    fn periodic_difference_wraps_across_the_seam() {
        let plain = HmmController::build(toy_model([3.0, -2.5]), scalar_cost(1.0), DMatrix::identity(1, 1), 1e-12, 10_000).unwrap();
        let wrapped = plain.clone().with_periods(vec![2.0 * std::f64::consts::PI]).unwrap();
        let y = DVector::from_element(1, 3.1);
        let (mut a, mut b) = (plain.clone(), wrapped.clone());
        let (tau_a, ..) = a.step_detailed(&y).unwrap();
        let (tau_b, ..) = b.step_detailed(&y).unwrap();
        // plain: (u₁ − p₁)(μ₁ − μ₀) = (u₁ − p₁)(−5.5); wrapped: μ₁ seen at 2π − 2.5
        let ratio = (2.0 * std::f64::consts::PI - 5.5) / -5.5;
        assert!(tau_a[0].abs() > 1e-3);
        assert!((tau_b[0] - ratio * tau_a[0]).abs() < 1e-12);
        // far from the seam the two agree
        let (mut a, mut b) = (plain, wrapped);
        let y = DVector::from_element(1, 0.2);
        assert!((a.control_step(&y).unwrap()[0] - b.control_step(&y).unwrap()[0]).abs() < 1e-12);
    }
}
