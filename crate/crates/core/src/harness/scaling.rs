//! Reaching-task sweep over the number of joints.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelConfig, SolverKind};
use super::pipeline::{collect, run, snapped_target, solve, train};
use super::HarnessError;
use crate::envs::{Env, ReachArmEnv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingStatus {
    Ok,
    Infeasible,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingRow {
    pub joints: usize,
    pub solver: SolverKind,
    pub status: ScalingStatus,
    pub solve_seconds: Option<f64>,
    pub control_seconds_per_step: Option<f64>,
    pub mean_error: Option<f64>,
    pub ci95: Option<f64>,
    pub outer_iterations: Option<usize>,
}

/// The reaching config for `joints` joints with a grid-snapped target.
pub fn reaching_config(template: &ExperimentConfig, joints: usize) -> Result<ExperimentConfig, HarnessError> {
    let Env::Reach(r) = &template.env else {
        return Err(HarnessError::Config("eval-scaling needs the reaching task".into()));
    };
    let ModelConfig::Fhmm { values, .. } = template.model else {
        return Err(HarnessError::Config("eval-scaling needs a factorial model".into()));
    };
    let (_, target) = snapped_target(joints, values, template.seed);
    let mut cfg = template.clone();
    cfg.env = Env::Reach(ReachArmEnv::new(joints, target, r.dt).map_err(|e| HarnessError::Config(e.to_string()))?);
    cfg.control.start_box = None;
    if cfg.control.gain.len() != 1 {
        return Err(HarnessError::Config("eval-scaling needs a single scalar gain".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Whether the configured caps admit `solver` at `joints` chains of `values`.
pub fn feasible(cfg: &ExperimentConfig, solver: SolverKind, joints: usize, values: usize) -> bool {
    let pow = |e: usize| values.checked_pow(e as u32);
    match solver {
        SolverKind::Exact => pow(joints).is_some_and(|s| s <= cfg.solver.caps.exact_states),
        SolverKind::Vkl => pow(joints - 1).is_some_and(|s| s <= cfg.solver.caps.vkl_evaluations),
        SolverKind::Avkl => true,
        SolverKind::Vi => false,
    }
}

/// Solves and evaluates every feasible solver for every joint count.
pub fn eval_scaling(
    template: &ExperimentConfig,
    joints: &[usize],
    solvers: &[SolverKind],
) -> Result<Vec<ScalingRow>, HarnessError> {
    let mut rows = Vec::new();
    for &j in joints {
        let base = reaching_config(template, j)?;
        let ModelConfig::Fhmm { values, .. } = base.model else { unreachable!("checked by reaching_config") };
        let data = collect(&base)?;
        let trained = train(&base, &[data])?;
        for &kind in solvers {
            let mut cfg = base.clone();
            cfg.solver.kind = kind;
            let infeasible = ScalingRow {
                joints: j,
                solver: kind,
                status: ScalingStatus::Infeasible,
                solve_seconds: None,
                control_seconds_per_step: None,
                mean_error: None,
                ci95: None,
                outer_iterations: None,
            };
            if !feasible(&cfg, kind, j, values) {
                rows.push(infeasible);
                continue;
            }
            let solved = match solve(&cfg, Some(&trained)) {
                Ok(s) => s,
                Err(HarnessError::Infeasible(_)) => {
                    rows.push(infeasible);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let report = run(&cfg, Some(&trained), &solved)?;
            let outer = match &solved.policy {
                super::Policy::Factored { policy } => Some(policy.iterations),
                _ => None,
            };
            rows.push(ScalingRow {
                joints: j,
                solver: kind,
                status: ScalingStatus::Ok,
                solve_seconds: Some(solved.seconds),
                control_seconds_per_step: Some(report.summary.mean_control_seconds_per_step),
                mean_error: Some(report.summary.mean),
                ci95: Some(report.summary.ci95),
                outer_iterations: outer,
            });
        }
    }
    Ok(rows)
}

pub fn scaling_csv(rows: &[ScalingRow], config_hash: &str) -> String {
    let mut out = format!(
        "# config_hash {config_hash}\njoints,solver,status,solve_seconds,control_seconds_per_step,mean_error,ci95,outer_iterations\n"
    );
    let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
    for r in rows {
        let status = match r.status {
            ScalingStatus::Ok => "ok",
            ScalingStatus::Infeasible => "infeasible",
        };
        writeln!(
            out,
            "{},{},{status},{},{},{},{},{}",
            r.joints,
            r.solver.name(),
            f(r.solve_seconds),
            f(r.control_seconds_per_step),
            f(r.mean_error),
            f(r.ci95),
            r.outer_iterations.map_or(String::new(), |i| i.to_string())
        )
        .expect("writing to a String");
    }
    out
}
