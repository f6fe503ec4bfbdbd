//! Grid value-iteration baseline for the pendulum.
//!
//! The state space is tiled by a periodic angle axis and a clamped velocity
//! axis. Each grid node simulates every discrete torque for `hold`
//! environment steps and spreads the landing point over the four
//! surrounding nodes with bilinear weights.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::ViConfig;
use crate::envs::{wrap_angle, PendulumEnv, PENDULUM_COST_DIAG};
use crate::klcore::{solve_value_iteration, KlError, ViProblem, ViSolution};
use crate::linalg::CsrMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendulumGrid {
    pub theta_cells: usize,
    pub omega_cells: usize,
    pub omega_max: f64,
}

impl PendulumGrid {
    pub fn n_states(&self) -> usize {
        self.theta_cells * self.omega_cells
    }

    fn theta_step(&self) -> f64 {
        2.0 * PI / self.theta_cells as f64
    }

    fn omega_step(&self) -> f64 {
        2.0 * self.omega_max / (self.omega_cells - 1) as f64
    }

    /// Node `(i, j)` sits at `θ = −π + (i + 1)·Δθ`, `ω = −ω_max + j·Δω`.
    pub fn node(&self, s: usize) -> [f64; 2] {
        let (i, j) = (s / self.omega_cells, s % self.omega_cells);
        [wrap_angle(-PI + (i + 1) as f64 * self.theta_step()), -self.omega_max + j as f64 * self.omega_step()]
    }

    /// Bilinear weights of `y` on the four surrounding nodes.
    pub fn interpolate(&self, y: &[f64]) -> [(usize, f64); 4] {
        let u = (wrap_angle(y[0]) + PI) / self.theta_step() - 1.0;
        let i0 = u.floor();
        let fu = u - i0;
        let n = self.theta_cells as i64;
        let ia = (i0 as i64).rem_euclid(n) as usize;
        let ib = (i0 as i64 + 1).rem_euclid(n) as usize;
        let v = ((y[1].clamp(-self.omega_max, self.omega_max) + self.omega_max) / self.omega_step())
            .min((self.omega_cells - 1) as f64);
        let j0 = (v.floor() as usize).min(self.omega_cells - 2);
        let fv = v - j0 as f64;
        let s = |i: usize, j: usize| i * self.omega_cells + j;
        [
            (s(ia, j0), (1.0 - fu) * (1.0 - fv)),
            (s(ib, j0), fu * (1.0 - fv)),
            (s(ia, j0 + 1), (1.0 - fu) * fv),
            (s(ib, j0 + 1), fu * fv),
        ]
    }

    pub fn value_at(&self, values: &[f64], y: &[f64]) -> f64 {
        self.interpolate(y).iter().map(|(s, w)| w * values[*s]).sum()
    }
}

/// Solved grid problem plus what the closed loop needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PendulumVi {
    pub grid: PendulumGrid,
    pub actions: Vec<f64>,
    pub hold: usize,
    pub alpha: f64,
    pub solution: ViSolution,
}

/// Per-step cost `α q̃(y) + ½ τ²`.
pub fn step_cost(alpha: f64, y: &[f64], tau: f64) -> f64 {
    alpha * (y[0] * y[0] / PENDULUM_COST_DIAG[0] + y[1] * y[1] / PENDULUM_COST_DIAG[1]) + 0.5 * tau * tau
}

/// Builds the grid MDP; a decision lasts `hold` steps and costs their sum.
pub fn build_problem(env: &PendulumEnv, cfg: &ViConfig, alpha: f64) -> Result<(PendulumGrid, ViProblem), KlError> {
    let grid = PendulumGrid { theta_cells: cfg.theta_cells, omega_cells: cfg.omega_cells, omega_max: cfg.omega_max };
    let n = grid.n_states();
    let mut cost = DMatrix::zeros(n, cfg.actions.len());
    let mut transitions = Vec::with_capacity(cfg.actions.len());
    for (a, &tau) in cfg.actions.iter().enumerate() {
        let tau = tau.clamp(-env.torque_max, env.torque_max);
        let mut rows = Vec::with_capacity(n);
        for s in 0..n {
            let y = grid.node(s);
            let mut c = 0.0;
            let mut cur = y.to_vec();
            for _ in 0..cfg.hold {
                c += step_cost(alpha, &cur, tau);
                cur = env.step(&cur, tau);
            }
            cost[(s, a)] = c;
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
            for (j, w) in grid.interpolate(&cur) {
                if w <= 0.0 {
                    continue;
                }
                match row.iter_mut().find(|(k, _)| *k == j) {
                    Some(e) => e.1 += w,
                    None => row.push((j, w)),
                }
            }
            let total: f64 = row.iter().map(|(_, w)| w).sum();
            row.iter_mut().for_each(|e| e.1 /= total);
            row.sort_by_key(|e| e.0);
            rows.push(row);
        }
        transitions.push(CsrMatrix::from_rows(n, rows));
    }
    Ok((grid, ViProblem::new(transitions, cost)?))
}

pub fn solve(env: &PendulumEnv, cfg: &ViConfig, alpha: f64, tol: f64, max_iter: usize) -> Result<PendulumVi, KlError> {
    let (grid, problem) = build_problem(env, cfg, alpha)?;
    let solution = solve_value_iteration(&problem, tol, max_iter)?;
    Ok(PendulumVi { grid, actions: cfg.actions.clone(), hold: cfg.hold, alpha, solution })
}

impl PendulumVi {
    /// Greedy one-decision lookahead on the interpolated relative values.
    pub fn act(&self, env: &PendulumEnv, y: &[f64]) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for &tau in &self.actions {
            let tau = tau.clamp(-env.torque_max, env.torque_max);
            let mut c = 0.0;
            let mut cur = y.to_vec();
            for _ in 0..self.hold {
                c += step_cost(self.alpha, &cur, tau);
                cur = env.step(&cur, tau);
            }
            let q = c + self.grid.value_at(&self.solution.values, &cur);
            if q < best.0 {
                best = (q, tau);
            }
        }
        best.1
    }
}

/// Closed-loop VI controller holding each decision for `hold` steps.
#[derive(Debug, Clone)]
pub struct ViController<'a> {
    vi: &'a PendulumVi,
    env: PendulumEnv,
    current: f64,
    t: usize,
}

impl<'a> ViController<'a> {
    pub fn new(vi: &'a PendulumVi, env: PendulumEnv) -> Self {
        Self { vi, env, current: 0.0, t: 0 }
    }

    pub fn control_step(&mut self, y: &[f64]) -> f64 {
        if self.t % self.vi.hold == 0 {
            self.current = self.vi.act(&self.env, y);
        }
        self.t += 1;
        self.current
    }
}
