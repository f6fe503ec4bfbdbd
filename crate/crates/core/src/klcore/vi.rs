//! Relative value iteration for fully discretized average-cost MDPs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{KlError, STOCHASTIC_TOL};
use crate::format::dmatrix;
use crate::linalg::CsrMatrix;

/// Finite MDP with per-action transition matrices `p(x'|x,u)` and an
/// immediate cost table `r(x,u)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViProblem {
    transitions: Vec<CsrMatrix>,
    #[serde(with = "dmatrix")]
    immediate_cost: DMatrix<f64>,
}

impl ViProblem {
    pub fn new(transitions: Vec<CsrMatrix>, immediate_cost: DMatrix<f64>) -> Result<Self, KlError> {
        let (n, a) = immediate_cost.shape();
        if n == 0 || a == 0 {
            return Err(KlError::InvalidProblem("empty state or action set".into()));
        }
        if transitions.len() != a {
            return Err(KlError::InvalidProblem(format!("{a} actions but {} transition matrices", transitions.len())));
        }
        for (u, t) in transitions.iter().enumerate() {
            if t.n_rows != n || t.n_cols != n {
                return Err(KlError::InvalidProblem(format!("action {u}: transition is not {n}x{n}")));
            }
            for x in 0..n {
                let s: f64 = t.row(x).map(|(_, v)| v).sum();
                if (s - 1.0).abs() > STOCHASTIC_TOL || t.row(x).any(|(_, v)| !(0.0..=1.0).contains(&v)) {
                    return Err(KlError::InvalidProblem(format!("p(.|{x},{u}) is not a distribution (sum {s})")));
                }
            }
        }
        if immediate_cost.iter().any(|c| !c.is_finite()) {
            return Err(KlError::InvalidProblem("immediate costs must be finite".into()));
        }
        Ok(Self { transitions, immediate_cost })
    }

    pub fn n_states(&self) -> usize {
        self.immediate_cost.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.immediate_cost.ncols()
    }

    pub fn transition(&self, action: usize) -> &CsrMatrix {
        &self.transitions[action]
    }

    pub fn cost(&self, state: usize, action: usize) -> f64 {
        self.immediate_cost[(state, action)]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViSolution {
    /// Relative values, zero at the reference state.
    pub values: Vec<f64>,
    /// Greedy action per state (lowest index on ties).
    pub policy: Vec<usize>,
    pub average_cost: f64,
    pub iterations: usize,
    /// Span of the last value difference.
    pub span: f64,
}

/// Relative value iteration referenced to state 0.
///
/// Iterates `h ← T h − (T h)(0)` and stops once the span seminorm of
/// `T h − h` drops below `tol`; the average cost is the midpoint of the
/// final bracket `[min(Th − h), max(Th − h)]`.
pub fn solve_value_iteration(problem: &ViProblem, tol: f64, max_iter: usize) -> Result<ViSolution, KlError> {
    let n = problem.n_states();
    let a = problem.n_actions();
    let mut h = vec![0.0; n];
    let mut th = vec![0.0; n];
    let mut policy = vec![0usize; n];
    for it in 1..=max_iter {
        bellman(problem, &h, &mut th, &mut policy);
        let (lo, hi) = th.iter().zip(&h).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (t, v)| {
            let d = t - v;
            (lo.min(d), hi.max(d))
        });
        let span = hi - lo;
        let offset = th[0];
        for (v, t) in h.iter_mut().zip(&th) {
            *v = t - offset;
        }
        if span < tol {
            // greedy policy with respect to the converged values
            bellman(problem, &h, &mut th, &mut policy);
            debug_assert!(a > 0);
            return Ok(ViSolution { values: h, policy, average_cost: 0.5 * (lo + hi), iterations: it, span });
        }
        if !span.is_finite() {
            return Err(KlError::NonConvergence { iterations: it, residual: span });
        }
        if it == max_iter {
            return Err(KlError::NonConvergence { iterations: it, residual: span });
        }
    }
    unreachable!("max_iter >= 1 always returns inside the loop")
}

fn bellman(problem: &ViProblem, h: &[f64], out: &mut [f64], policy: &mut [usize]) {
    let n = problem.n_states();
    for x in 0..n {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for u in 0..problem.n_actions() {
            let mut q = problem.cost(x, u);
            for (j, p) in problem.transitions[u].row(x) {
                q += p * h[j];
            }
            if q < best {
                best = q;
                arg = u;
            }
        }
        out[x] = best;
        policy[x] = arg;
    }
}
