//! Run reports, per-episode metrics and CSV emission.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::envs::Env;

/// `|θ| ≤ 0.5` counts as upright.
pub const UPRIGHT: f64 = 0.5;
/// Joint-space distance that counts as reaching the arm goal.
pub const ARM_TOLERANCE: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub trial: usize,
    pub seed: u64,
    /// `len + 1` states, the last one after the final control.
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// Task cost of every state.
    pub costs: Vec<f64>,
    /// Pendulum: upright fraction of the final quarter; arm: final distance
    /// to the goal; reaching: final end-effector error.
    pub metric: f64,
    /// Arm moves rejected for entering the obstacle.
    pub collisions: usize,
    pub success: Option<bool>,
    pub filter_resets: usize,
    pub control_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    pub metric: f64,
    pub collisions: usize,
    pub success: Option<bool>,
}

/// Recomputes the summary metrics of an episode from its trajectory.
pub fn episode_metrics(cfg: &ExperimentConfig, states: &[Vec<f64>], controls: &[Vec<f64>]) -> EpisodeMetrics {
    let last = states.last().expect("episodes hold at least the start state");
    match &cfg.env {
        Env::Pendulum(_) => {
            let len = controls.len();
            let from = len - len / 4;
            let window = &states[from + 1..];
            let up = window.iter().filter(|y| y[0].abs() <= UPRIGHT).count();
            let frac = if window.is_empty() { 0.0 } else { up as f64 / window.len() as f64 };
            EpisodeMetrics { metric: frac, collisions: 0, success: Some(up == window.len()) }
        }
        Env::Arm(a) => {
            let collisions = states
                .iter()
                .zip(controls)
                .filter(|(y, tau)| {
                    let p: Vec<f64> = y.iter().zip(tau.iter()).map(|(q, u)| q + a.dt * u).collect();
                    a.collides(&p)
                })
                .count();
            let goal = cfg.target();
            let d = last.iter().zip(&goal).map(|(q, g)| (q - g).powi(2)).sum::<f64>().sqrt();
            EpisodeMetrics { metric: d, collisions, success: Some(d <= ARM_TOLERANCE && collisions == 0) }
        }
        Env::Reach(_) => EpisodeMetrics { metric: cfg.env.task_cost(last), collisions: 0, success: None },
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    /// Half width of the normal 95% interval of the mean.
    pub ci95: f64,
    pub success_rate: Option<f64>,
    pub mean_control_seconds_per_step: f64,
}

impl Summary {
    pub fn of(cfg: &ExperimentConfig, episodes: &[EpisodeReport]) -> Self {
        let n = episodes.len() as f64;
        let mean = episodes.iter().map(|e| e.metric).sum::<f64>() / n;
        let var = if episodes.len() > 1 {
            episodes.iter().map(|e| (e.metric - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std = var.sqrt();
        let success_rate = if episodes.iter().all(|e| e.success.is_some()) {
            Some(episodes.iter().filter(|e| e.success == Some(true)).count() as f64 / n)
        } else {
            None
        };
        let steps = (cfg.control.episode_len as f64 * n).max(1.0);
        Self {
            metric: match cfg.env {
                Env::Pendulum(_) => "upright_fraction",
                Env::Arm(_) => "goal_distance",
                Env::Reach(_) => "reach_error",
            }
            .into(),
            mean,
            std,
            ci95: 1.96 * std / n.sqrt(),
            success_rate,
            mean_control_seconds_per_step: episodes.iter().map(|e| e.control_seconds).sum::<f64>() / steps,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds: f64,
    pub solve_seconds: f64,
    pub run_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub env: String,
    pub solver: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub root_seed: u64,
    pub objective_trace: Vec<f64>,
    pub summary: Summary,
    pub timings: Timings,
    pub episodes: Vec<EpisodeReport>,
}

impl RunReport {
    /// One row per episode, headed by the config hash.
    pub fn episodes_csv(&self) -> String {
        let mut out = format!("# config_hash {}\ntrial,seed,metric,collisions,success,filter_resets\n", self.config_hash);
        for e in &self.episodes {
            let success = e.success.map_or(String::new(), |s| s.to_string());
            writeln!(out, "{},{},{:?},{},{},{}", e.trial, e.seed, e.metric, e.collisions, success, e.filter_resets)
                .expect("writing to a String");
        }
        out
    }

    /// Per-step states, controls and costs of every episode.
    pub fn steps_csv(&self) -> String {
        let mut out = format!("# config_hash {}\ntrial,t,state,control,cost\n", self.config_hash);
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        for e in &self.episodes {
            for (t, y) in e.states.iter().enumerate() {
                let tau = e.controls.get(t).map_or(String::new(), |u| join(u));
                writeln!(out, "{},{t},{},{tau},{:?}", e.trial, join(y), e.costs[t]).expect("writing to a String");
            }
        }
        out
    }
}
