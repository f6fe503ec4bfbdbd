//! Discrete Kullback-Leibler control in the average-cost setting.
//!
//! A problem is an uncontrolled chain `P`, a nonnegative state cost `q` and a
//! scale `α`. The optimal desirability `z` is the principal eigenvector of
//! `G·P` with `G = diag(exp(−α q))`; the optimal average cost is `−ln λ` and
//! the optimal transition law is `u*(x'|x) ∝ P(x'|x) z(x')`.
//!
//! States may be marked forbidden, which stands for an infinite state cost:
//! their entry of `G` is exactly zero.

mod ergodic;
mod transition;
pub mod vi;

pub use ergodic::{check_ergodic, check_ergodic_masked, ErgodicityReport};
pub use transition::Transition;
pub use vi::{solve_value_iteration, ViProblem, ViSolution};

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{kl_divergence, max_abs_diff};

/// Default solver tolerance.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Row-sum tolerance for stochastic matrices.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Largest chain solved with a dense linear system for stationary
/// distributions.
pub const DENSE_STATIONARY_MAX: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KlError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("power iteration did not converge in {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("degenerate problem: {0}")]
    DegenerateProblem(String),
    #[error("desirability vanishes on every successor of reachable state {state}")]
    ZeroNormalizer { state: usize },
    #[error("policy moves {from} -> {to} where the uncontrolled chain cannot")]
    NotAbsolutelyContinuous { from: usize, to: usize },
    #[error("policy has {0} closed classes")]
    NonErgodicPolicy(usize),
}

/// Discrete KL-control problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlProblem {
    uncontrolled: Transition,
    state_cost: Vec<f64>,
    forbidden: Vec<bool>,
    cost_scale: f64,
}

impl KlProblem {
    pub fn new(uncontrolled: Transition, state_cost: Vec<f64>, cost_scale: f64) -> Result<Self, KlError> {
        let n = state_cost.len();
        Self::with_forbidden(uncontrolled, state_cost, vec![false; n], cost_scale)
    }

    pub fn with_forbidden(
        uncontrolled: Transition,
        state_cost: Vec<f64>,
        forbidden: Vec<bool>,
        cost_scale: f64,
    ) -> Result<Self, KlError> {
        let n = uncontrolled.n_states();
        if n == 0 {
            return Err(KlError::InvalidProblem("empty state space".into()));
        }
        if state_cost.len() != n || forbidden.len() != n {
            return Err(KlError::InvalidProblem(format!(
                "{n} states but {} costs and {} forbidden flags",
                state_cost.len(),
                forbidden.len()
            )));
        }
        uncontrolled.check_stochastic(STOCHASTIC_TOL).map_err(KlError::InvalidProblem)?;
        if let Some(i) = state_cost.iter().position(|q| !(q.is_finite() && *q >= 0.0)) {
            return Err(KlError::InvalidProblem(format!("state cost {i} = {} is not finite and nonnegative", state_cost[i])));
        }
        if !(cost_scale.is_finite() && cost_scale >= 0.0) {
            return Err(KlError::InvalidProblem(format!("cost scale {cost_scale} must be finite and nonnegative")));
        }
        let problem = Self { uncontrolled, state_cost, forbidden, cost_scale };
        if problem.forbidden.iter().all(|&f| f) {
            return Ok(problem);
        }
        let report = check_ergodic_masked(&problem.uncontrolled, Some(&problem.forbidden));
        if !report.ergodic {
            return Err(KlError::InvalidProblem(format!(
                "uncontrolled chain has {} closed classes on allowed states",
                report.recurrent_classes.len()
            )));
        }
        Ok(problem)
    }

    pub fn n_states(&self) -> usize {
        self.state_cost.len()
    }

    pub fn uncontrolled(&self) -> &Transition {
        &self.uncontrolled
    }

    pub fn state_cost(&self) -> &[f64] {
        &self.state_cost
    }

    pub fn forbidden(&self) -> &[bool] {
        &self.forbidden
    }

    pub fn cost_scale(&self) -> f64 {
        self.cost_scale
    }

    /// Diagonal of `G`: `exp(−α q(x))`, exactly zero on forbidden states.
    pub fn state_weights(&self) -> Vec<f64> {
        self.state_cost
            .iter()
            .zip(&self.forbidden)
            .map(|(&q, &f)| if f { 0.0 } else { (-(self.cost_scale * q)).exp() })
            .collect()
    }

    /// `α q(x)`, `+∞` on forbidden states.
    pub fn scaled_cost(&self, x: usize) -> f64 {
        if self.forbidden[x] {
            f64::INFINITY
        } else {
            self.cost_scale * self.state_cost[x]
        }
    }
}

/// Solution of a [`KlProblem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlSolution {
    /// Principal eigenvector of `G·P`, max entry 1.
    pub desirability: Vec<f64>,
    pub eigenvalue: f64,
    /// `−ln λ`.
    pub average_cost: f64,
    /// `−ln z`, `+∞` where `z` vanishes.
    pub cost_to_go: Vec<f64>,
    pub optimal_control: Transition,
    pub iterations: usize,
    /// `‖λz − GPz‖∞ / ‖z‖∞` at exit.
    pub residual: f64,
}

/// Principal eigenpair of `G·P` by power iteration from the all-ones vector,
/// normalizing by the max entry each sweep. Stops once both the recent steps
/// and the remaining error they imply under the observed contraction rate,
/// `step · r / (1 − r)`, fall below `tol`.
pub fn solve_power_iteration(problem: &KlProblem, tol: f64, max_iter: usize) -> Result<KlSolution, KlError> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(KlError::InvalidProblem(format!("tol {tol} must be positive and max_iter {max_iter} at least 1")));
    }
    let g = problem.state_weights();
    if g.iter().all(|&w| w == 0.0) {
        return Err(KlError::DegenerateProblem("every state is forbidden or has zero weight".into()));
    }
    let p = problem.uncontrolled();
    if g.iter().all(|&w| w == g[0]) {
        // Constant G: z = 1 exactly, λ = g, and u* = P.
        let n = problem.n_states();
        let residual = p.apply(&vec![1.0; n]).iter().map(|v| (g[0] - g[0] * v).abs()).fold(0.0, f64::max);
        return Ok(KlSolution {
            desirability: vec![1.0; n],
            eigenvalue: g[0],
            average_cost: -g[0].ln(),
            cost_to_go: vec![0.0; n],
            optimal_control: p.clone(),
            iterations: 0,
            residual,
        });
    }
    let gp = |z: &[f64]| -> Vec<f64> {
        let mut y = p.apply(z);
        y.iter_mut().zip(&g).for_each(|(v, w)| *v *= w);
        y
    };

    let n = problem.n_states();
    let mut z = vec![1.0; n];
    let mut iterations = 0;
    let mut converged = false;
    // Recent step sizes. Their geometric decay over the window estimates the
    // contraction rate even when a complex subdominant pair makes single
    // ratios oscillate.
    const SPAN: usize = 4;
    let mut steps: VecDeque<f64> = VecDeque::with_capacity(SPAN + 1);
    while iterations < max_iter {
        iterations += 1;
        let y = gp(&z);
        let m = y.iter().copied().fold(0.0, f64::max);
        if !(m > 0.0) || !m.is_finite() {
            return Err(KlError::DegenerateProblem("G·P annihilated the iterate".into()));
        }
        let next: Vec<f64> = y.iter().map(|v| v / m).collect();
        let diff = max_abs_diff(&next, &z);
        z = next;
        if steps.len() == SPAN + 1 {
            steps.pop_front();
        }
        steps.push_back(diff);
        if diff == 0.0 {
            converged = true;
            break;
        }
        let scale = steps.iter().copied().fold(0.0, f64::max);
        let rate = if steps.len() == SPAN + 1 { (diff / steps[0]).powf(1.0 / SPAN as f64) } else { 1.0 };
        if scale < tol && rate < 1.0 && scale * rate / (1.0 - rate) < tol {
            converged = true;
            break;
        }
    }

    let y = gp(&z);
    let eigenvalue = y.iter().copied().fold(0.0, f64::max);
    let z_max = z.iter().copied().fold(0.0, f64::max);
    let residual = z.iter().zip(&y).map(|(a, b)| (eigenvalue * a - b).abs()).fold(0.0, f64::max) / z_max;
    if !converged && residual > tol {
        return Err(KlError::NonConvergence { iterations, residual });
    }
    let optimal_control = optimal_control_from_z(problem, &z)?;
    Ok(KlSolution {
        cost_to_go: z.iter().map(|v| -v.ln()).collect(),
        desirability: z,
        eigenvalue,
        average_cost: -eigenvalue.ln(),
        optimal_control,
        iterations,
        residual,
    })
}

/// `u*(x'|x) = p(x'|x) z(x') / Σ_x'' p(x''|x) z(x'')`.
///
/// Rows whose normalizer vanishes are kept as dead ends (see
/// [`Transition::dead_ends`]); that is only legal where `z(x) = 0`.
pub fn optimal_control_from_z(problem: &KlProblem, desirability: &[f64]) -> Result<Transition, KlError> {
    let n = problem.n_states();
    if desirability.len() != n {
        return Err(KlError::InvalidProblem(format!("desirability has {} entries, expected {n}", desirability.len())));
    }
    if desirability.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(KlError::InvalidProblem("desirability must be finite and nonnegative".into()));
    }
    if desirability.iter().all(|&v| v == 0.0) {
        return Err(KlError::InvalidProblem("desirability is identically zero".into()));
    }
    if desirability.iter().all(|&v| v == desirability[0]) {
        return Ok(problem.uncontrolled().clone());
    }
    let normalizer = problem.uncontrolled().apply(desirability);
    if let Some(state) = (0..n).find(|&i| normalizer[i] <= 0.0 && desirability[i] > 0.0) {
        return Err(KlError::ZeroNormalizer { state });
    }
    Ok(Transition::Tilted {
        base: Box::new(problem.uncontrolled().clone()),
        weights: desirability.to_vec(),
        normalizer,
    })
}

/// `Σ_x Π(x) [α q(x) + KL(π(·|x) ‖ P(·|x))]` with `Π` the stationary
/// distribution of `policy`.
pub fn average_cost_of_policy(problem: &KlProblem, policy: &Transition) -> Result<f64, KlError> {
    let n = problem.n_states();
    if policy.n_states() != n {
        return Err(KlError::InvalidProblem(format!("policy has {} states, expected {n}", policy.n_states())));
    }
    let p = problem.uncontrolled();
    let mut kl = Vec::with_capacity(n);
    for x in 0..n {
        let prow = p.row(x);
        let urow = policy.row(x);
        for &(j, v) in &urow {
            if v > 0.0 && !prow.iter().any(|&(k, pv)| k == j && pv > 0.0) {
                return Err(KlError::NotAbsolutelyContinuous { from: x, to: j });
            }
        }
        kl.push(kl_divergence(&urow, &prow));
    }
    let report = check_ergodic(policy);
    if !report.ergodic {
        return Err(KlError::NonErgodicPolicy(report.recurrent_classes.len()));
    }
    let pi = stationary_distribution(policy, 1e-12)?;
    let mut total = 0.0;
    for x in 0..n {
        if pi[x] > 0.0 {
            total += pi[x] * (problem.scaled_cost(x) + kl[x]);
        }
    }
    Ok(total)
}

/// Stationary distribution of an ergodic chain. Chains up to
/// [`DENSE_STATIONARY_MAX`] states use a dense linear solve; larger ones use
/// power iteration on the lazy chain `(I + T)/2` until successive iterates
/// differ by less than `tol`.
pub fn stationary_distribution(t: &Transition, tol: f64) -> Result<Vec<f64>, KlError> {
    let n = t.n_states();
    if n <= DENSE_STATIONARY_MAX {
        if let Some(pi) = dense_stationary(t) {
            return Ok(pi);
        }
    }
    stationary_power(t, tol, 10_000_000)
}

fn dense_stationary(t: &Transition) -> Option<Vec<f64>> {
    let n = t.n_states();
    let p = t.to_dense();
    let mut a: DMatrix<f64> = DMatrix::identity(n, n) - p.transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let sol = a.lu().solve(&b)?;
    let mut pi: Vec<f64> = sol.iter().map(|v| v.max(0.0)).collect();
    let s: f64 = pi.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return None;
    }
    pi.iter_mut().for_each(|v| *v /= s);
    Some(pi)
}

/// Power iteration on the lazy chain, starting from uniform.
pub fn stationary_power(t: &Transition, tol: f64, max_iter: usize) -> Result<Vec<f64>, KlError> {
    let n = t.n_states();
    let mut pi = vec![1.0 / n as f64; n];
    for it in 1..=max_iter {
        let stepped = t.propagate(&pi);
        let mut next: Vec<f64> = pi.iter().zip(&stepped).map(|(a, b)| 0.5 * (a + b)).collect();
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= s);
        let diff = max_abs_diff(&next, &pi);
        pi = next;
        if diff < tol {
            return Ok(pi);
        }
        if it == max_iter {
            return Err(KlError::NonConvergence { iterations: it, residual: diff });
        }
    }
    Ok(pi)
}
