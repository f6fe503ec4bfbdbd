//! Experiment configuration, read from TOML.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::envs::{Env, ExploreOptions, ARM_COST_DIAG, ARM_GOAL, PENDULUM_COST_DIAG};
use crate::fhmmctl::SolverCaps;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every other seed is derived from it.
    pub seed: u64,
    pub env: Env,
    pub explore: ExploreOptions,
    pub model: ModelConfig,
    pub cost: CostConfig,
    pub control: ControlConfig,
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vi: Option<ViConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Hmm {
        /// Number of hidden states `N`.
        states: usize,
        em_iters: usize,
        em_tol: f64,
        /// Extra nearest-neighbour transitions in the initial support.
        neighbors: usize,
        /// Pseudo-count mass spread over the initial support.
        smoothing: f64,
        /// Retrain with the next k-means seed when the learned chain is not
        /// ergodic, at most this many times.
        restarts: usize,
    },
    Fhmm {
        /// Values per chain `K`; one chain per joint.
        values: usize,
        em_iters: usize,
        em_tol: f64,
        /// Mean-field sweeps `I` per E-step and per filtering window.
        sweeps: usize,
        /// Fixed observation variance in units of the squared grid spacing.
        obs_var: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// `α = α_0 Δt / σ_ε²`.
    pub alpha0: f64,
    /// `diag(Σ_q)`; quadratic tasks only, defaults to the task's values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_q: Option<Vec<f64>>,
    /// Quadratic target; defaults to upright or the arm goal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// Gain entries, one per state dimension; a single value is repeated.
    /// Entry `i` weights state difference `i` in control `min(i, d − 1)`,
    /// so square gains are diagonal and a scalar control sums all entries.
    pub gain: Vec<f64>,
    pub episode_len: usize,
    pub trials: usize,
    /// Per-dimension `[low, high]` box for episode starts; all admissible
    /// states when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_box: Option<Vec<[f64; 2]>>,
    /// Filtering window `H` for factorial models; `2J` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Samples `L` per predictive mean for factorial models.
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_samples() -> usize {
    30
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Exact,
    Vkl,
    Avkl,
    Vi,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Exact => "exact",
            SolverKind::Vkl => "vkl",
            SolverKind::Avkl => "avkl",
            SolverKind::Vi => "vi",
        }
    }

    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s {
            "exact" => Ok(SolverKind::Exact),
            "vkl" => Ok(SolverKind::Vkl),
            "avkl" => Ok(SolverKind::Avkl),
            "vi" => Ok(SolverKind::Vi),
            _ => Err(HarnessError::Config(format!("unknown solver {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub kind: SolverKind,
    /// Eigenvector and value-iteration tolerance.
    pub tol: f64,
    pub max_iter: usize,
    /// Outer coordinate-descent iterations for VKL and AVKL.
    pub max_outer: usize,
    #[serde(default = "default_caps")]
    pub caps: CapsConfig,
}

fn default_caps() -> CapsConfig {
    CapsConfig::from(SolverCaps::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsConfig {
    pub exact_states: usize,
    pub vkl_evaluations: usize,
    pub exact_objective: usize,
}

impl From<SolverCaps> for CapsConfig {
    fn from(c: SolverCaps) -> Self {
        Self { exact_states: c.exact_states, vkl_evaluations: c.vkl_evaluations, exact_objective: c.exact_objective }
    }
}

impl From<CapsConfig> for SolverCaps {
    fn from(c: CapsConfig) -> Self {
        Self { exact_states: c.exact_states, vkl_evaluations: c.vkl_evaluations, exact_objective: c.exact_objective }
    }
}

/// Grid value iteration for the pendulum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViConfig {
    pub theta_cells: usize,
    pub omega_cells: usize,
    /// Velocity grid spans `[−omega_max, omega_max]` (rad/s).
    pub omega_max: f64,
    /// Discrete torques (N·m).
    pub actions: Vec<f64>,
    /// Environment steps per decision.
    pub hold: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize to TOML")
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.env.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.explore.steps == 0 || !(self.explore.noise_var > 0.0 && self.explore.noise_var.is_finite()) {
            return bad("explore needs steps ≥ 1 and noise_var > 0".into());
        }
        match (&self.model, &self.env) {
            (ModelConfig::Hmm { states, smoothing, .. }, Env::Pendulum(_) | Env::Arm(_)) => {
                if *states == 0 || !(*smoothing >= 0.0) {
                    return bad("hmm needs states ≥ 1 and smoothing ≥ 0".into());
                }
            }
            (ModelConfig::Fhmm { values, sweeps, obs_var, .. }, Env::Reach(_)) => {
                if *values < 2 || *sweeps == 0 || !(*obs_var > 0.0) {
                    return bad("fhmm needs values ≥ 2, sweeps ≥ 1 and obs_var > 0".into());
                }
            }
            (ModelConfig::Hmm { .. }, Env::Reach(_)) => return bad("the reaching task uses a factorial model".into()),
            (ModelConfig::Fhmm { .. }, _) => return bad("factorial models are only wired to the reaching task".into()),
        }
        if !(self.cost.alpha0 >= 0.0 && self.cost.alpha0.is_finite()) {
            return bad("alpha0 must be finite and nonnegative".into());
        }
        let d = self.env.state_dim();
        if let Some(s) = &self.cost.sigma_q {
            if s.len() != d || s.iter().any(|v| !(*v > 0.0)) {
                return bad(format!("sigma_q needs {d} positive entries"));
            }
        }
        if self.cost.target.as_ref().is_some_and(|t| t.len() != d) {
            return bad(format!("cost target needs {d} entries"));
        }
        let c = &self.control;
        if !(c.gain.len() == 1 || c.gain.len() == d) || c.gain.iter().any(|g| !g.is_finite()) {
            return bad(format!("gain needs 1 or {d} finite entries"));
        }
        if c.episode_len == 0 || c.trials == 0 || c.samples == 0 || c.window == Some(0) {
            return bad("episode_len, trials, samples and window must be positive".into());
        }
        if let Some(b) = &c.start_box {
            if b.len() != d || b.iter().any(|r| !(r[0] <= r[1])) {
                return bad("start_box needs low ≤ high for every state dimension".into());
            }
        }
        let s = &self.solver;
        if !(s.tol > 0.0) || s.max_iter == 0 || s.max_outer == 0 {
            return bad("solver needs tol > 0 and positive iteration limits".into());
        }
        match (s.kind, &self.model) {
            (SolverKind::Vkl | SolverKind::Avkl, ModelConfig::Hmm { .. }) => {
                return bad("vkl and avkl need a factorial model".into())
            }
            (SolverKind::Vi, _) if !matches!(self.env, Env::Pendulum(_)) => {
                return bad("value iteration is only wired to the pendulum".into())
            }
            (SolverKind::Vi, _) if self.vi.is_none() => return bad("solver vi needs a [vi] section".into()),
            _ => {}
        }
        if let Some(v) = &self.vi {
            if v.theta_cells < 2 || v.omega_cells < 2 || !(v.omega_max > 0.0) || v.actions.is_empty() || v.hold == 0 {
                return bad("vi needs ≥ 2 cells per axis, omega_max > 0, actions and hold ≥ 1".into());
            }
        }
        Ok(())
    }

    /// `α = α_0 Δt / σ_ε²`.
    pub fn alpha(&self) -> f64 {
        self.cost.alpha0 * self.env.dt() / self.explore.noise_var
    }

    pub fn sigma_q(&self) -> Vec<f64> {
        self.cost.sigma_q.clone().unwrap_or_else(|| match self.env {
            Env::Arm(_) => ARM_COST_DIAG.to_vec(),
            _ => PENDULUM_COST_DIAG.to_vec(),
        })
    }

    pub fn target(&self) -> Vec<f64> {
        self.cost.target.clone().unwrap_or_else(|| match self.env {
            Env::Arm(_) => ARM_GOAL.to_vec(),
            _ => vec![0.0; self.env.state_dim()],
        })
    }

    pub fn gain_entries(&self) -> Vec<f64> {
        let n = self.env.state_dim();
        if self.control.gain.len() == 1 {
            vec![self.control.gain[0]; n]
        } else {
            self.control.gain.clone()
        }
    }

    pub fn window(&self) -> usize {
        self.control.window.unwrap_or(2 * self.env.state_dim())
    }

    /// Observation periods: the pendulum angle wraps.
    pub fn periods(&self) -> Vec<f64> {
        match self.env {
            Env::Pendulum(_) => vec![2.0 * PI, 0.0],
            _ => vec![0.0; self.env.state_dim()],
        }
    }
}
