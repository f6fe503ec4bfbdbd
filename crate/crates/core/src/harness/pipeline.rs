//! The four pipeline stages.

use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelConfig, SolverKind};
use super::report::{episode_metrics, EpisodeReport, RunReport, Summary, Timings};
use super::vi::{self, PendulumVi, ViController};
use super::{derive_seed, par_map, trial_seed, HarnessError};
use crate::envs::{diag_inverse, explore_rollout, forward_kinematics, random_start, Env, Trajectory};
use crate::fhmm::{self, flatten_to_hmm, value_grid, FactorialHmm, FhmmEmOptions, SmfOptions};
use crate::fhmmctl::{solve_avkl, solve_exact, solve_vkl, FactoredOptions, FactoredPolicy, FhmmController, LatentCostSpec, SolveError};
use crate::hmm::{em_fit, init_from_kmeans, EmOptions, GaussianHmm, InitOptions};
use crate::hmmctl::{build_latent_problem, HmmController, QuadraticCost};
use crate::klcore::{check_ergodic, solve_power_iteration, KlSolution};
use crate::linalg::CsrMatrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainedModel {
    Hmm { model: GaussianHmm },
    Fhmm { model: FactorialHmm },
}

/// Model file contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trained {
    pub model: TrainedModel,
    /// Log-likelihood or variational bound after every iteration.
    pub trace: Vec<f64>,
    /// Retrainings triggered by a non-ergodic learned chain.
    pub restarts: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Optimal law on an HMM, or on the flattened factorial chain.
    Latent { solution: KlSolution },
    Factored { policy: FactoredPolicy },
    Vi { vi: PendulumVi },
}

/// Policy file contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Solved {
    pub solver: SolverKind,
    pub policy: Policy,
    /// Objective per outer iteration; the single average cost otherwise.
    pub trace: Vec<f64>,
    pub seconds: f64,
}

fn numerical(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Numerical(e.to_string())
}

fn solve_error(e: SolveError) -> HarnessError {
    match e {
        SolveError::CapExceeded { .. } => HarnessError::Infeasible(e.to_string()),
        other => numerical(other),
    }
}

/// Exploration rollout seeded by the root seed.
pub fn collect(cfg: &ExperimentConfig) -> Result<Trajectory, HarnessError> {
    explore_rollout(&cfg.env, &cfg.explore, cfg.seed).map_err(|e| HarnessError::Config(e.to_string()))
}

/// A grid-representable joint vector and its forward-kinematics image.
pub fn snapped_target(joints: usize, values: usize, seed: u64) -> (Vec<f64>, [f64; 2]) {
    let grid = value_grid(values, -FRAC_PI_2, FRAC_PI_2);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let q: Vec<f64> = (0..joints).map(|_| grid[rng.gen_range(0..values)]).collect();
    let t = forward_kinematics(&q);
    (q, t)
}

pub fn train(cfg: &ExperimentConfig, data: &[Trajectory]) -> Result<Trained, HarnessError> {
    if data.is_empty() {
        return Err(HarnessError::Config("no trajectories to train on".into()));
    }
    if let Some(t) = data.iter().find(|t| t.env.state_dim() != cfg.env.state_dim()) {
        return Err(HarnessError::Config(format!("trajectory from a {} environment", t.env.tag())));
    }
    let seqs: Vec<Vec<DVector<f64>>> = data.iter().flat_map(|t| t.sequences()).collect();
    let start = Instant::now();
    match &cfg.model {
        ModelConfig::Hmm { states, em_iters, em_tol, neighbors, smoothing, restarts } => {
            let opts = InitOptions { neighbors: *neighbors, smoothing: *smoothing };
            let em = EmOptions { max_iter: *em_iters, tol: *em_tol, ..Default::default() };
            let mut attempt = 0;
            loop {
                let init = init_from_kmeans(&seqs, *states, cfg.seed + attempt as u64, opts).map_err(numerical)?;
                let (model, report) = em_fit(&seqs, &init, em).map_err(numerical)?;
                let ergodic = check_ergodic(model.transition());
                if ergodic.ergodic || attempt >= *restarts {
                    if !ergodic.ergodic {
                        return Err(HarnessError::Numerical(format!(
                            "learned chain has {} closed classes after {attempt} restarts",
                            ergodic.recurrent_classes.len()
                        )));
                    }
                    let seconds = start.elapsed().as_secs_f64();
                    return Ok(Trained { model: TrainedModel::Hmm { model }, trace: report.trace, restarts: attempt, seconds });
                }
                attempt += 1;
            }
        }
        ModelConfig::Fhmm { values, em_iters, em_tol, sweeps, obs_var } => {
            let m = cfg.env.state_dim();
            let k = *values;
            let grid = value_grid(k, -FRAC_PI_2, FRAC_PI_2);
            let spacing = grid[1] - grid[0];
            let uniform = CsrMatrix::from_dense(&DMatrix::from_element(k, k, 1.0 / k as f64), 0.0);
            let init = FactorialHmm::new(
                vec![uniform; m],
                FactorialHmm::grid_weights(m, k, -FRAC_PI_2, FRAC_PI_2),
                DMatrix::identity(m, m) * (obs_var * spacing * spacing),
                vec![vec![1.0 / k as f64; k]; m],
            )
            .map_err(numerical)?;
            let opts = FhmmEmOptions {
                max_iter: *em_iters,
                tol: *em_tol,
                learn_weights: false,
                learn_covariance: false,
                smf: SmfOptions { n_sweeps: *sweeps, ..Default::default() },
                covariance_floor: None,
            };
            let (model, report) = fhmm::em_fit(&seqs, &init, opts).map_err(numerical)?;
            Ok(Trained { model: TrainedModel::Fhmm { model }, trace: report.trace, restarts: 0, seconds: start.elapsed().as_secs_f64() })
        }
    }
}

pub fn quadratic_cost(cfg: &ExperimentConfig) -> Result<QuadraticCost, HarnessError> {
    QuadraticCost::new(DVector::from_vec(cfg.target()), diag_inverse(&cfg.sigma_q()), cfg.alpha())
        .map_err(|e| HarnessError::Config(e.to_string()))
}

pub fn reaching_cost(cfg: &ExperimentConfig) -> Result<LatentCostSpec, HarnessError> {
    match &cfg.env {
        Env::Reach(r) => Ok(LatentCostSpec::Reaching { target: r.target, scale: cfg.alpha() }),
        _ => Err(HarnessError::Config("reaching cost needs the reaching task".into())),
    }
}

/// Solves the latent problem; value iteration needs no model.
pub fn solve(cfg: &ExperimentConfig, trained: Option<&Trained>) -> Result<Solved, HarnessError> {
    let s = &cfg.solver;
    let start = Instant::now();
    let (policy, trace) = match (s.kind, trained.map(|t| &t.model)) {
        (SolverKind::Vi, _) => {
            let (Env::Pendulum(p), Some(v)) = (&cfg.env, &cfg.vi) else {
                return Err(HarnessError::Config("value iteration needs the pendulum and a [vi] section".into()));
            };
            let vi = vi::solve(p, v, cfg.alpha(), s.tol, s.max_iter).map_err(numerical)?;
            let c = vi.solution.average_cost;
            (Policy::Vi { vi }, vec![c])
        }
        (_, None) => return Err(HarnessError::Config("solver needs a trained model".into())),
        (SolverKind::Exact, Some(TrainedModel::Hmm { model })) => {
            let problem = build_latent_problem(model, &quadratic_cost(cfg)?).map_err(numerical)?;
            let solution = solve_power_iteration(&problem, s.tol, s.max_iter).map_err(numerical)?;
            let c = solution.average_cost;
            (Policy::Latent { solution }, vec![c])
        }
        (SolverKind::Exact, Some(TrainedModel::Fhmm { model })) => {
            let solution =
                solve_exact(model, &reaching_cost(cfg)?, s.caps.exact_states, s.tol, s.max_iter).map_err(solve_error)?;
            let c = solution.average_cost;
            (Policy::Latent { solution }, vec![c])
        }
        (SolverKind::Vkl | SolverKind::Avkl, Some(TrainedModel::Fhmm { model })) => {
            let opts = FactoredOptions { max_outer: s.max_outer, tol: s.tol, eig_tol: s.tol, caps: s.caps.into() };
            let cost = reaching_cost(cfg)?;
            let policy = if s.kind == SolverKind::Vkl { solve_vkl(model, &cost, opts) } else { solve_avkl(model, &cost, opts) }
                .map_err(solve_error)?;
            let trace = policy.trace.clone();
            (Policy::Factored { policy }, trace)
        }
        (kind, Some(_)) => return Err(HarnessError::Config(format!("solver {} does not fit this model", kind.name()))),
    };
    Ok(Solved { solver: s.kind, policy, trace, seconds: start.elapsed().as_secs_f64() })
}

enum Controller<'a> {
    Hmm(Box<HmmController>),
    Fhmm(Box<FhmmController>),
    Vi(ViController<'a>),
}

impl Controller<'_> {
    fn step(&mut self, y: &[f64]) -> Result<Vec<f64>, HarnessError> {
        let obs = DVector::from_column_slice(y);
        Ok(match self {
            Controller::Hmm(c) => c.control_step(&obs).map_err(numerical)?.as_slice().to_vec(),
            Controller::Fhmm(c) => c.control_step(&obs).map_err(solve_error)?.as_slice().to_vec(),
            Controller::Vi(c) => vec![c.control_step(y)],
        })
    }

    fn filter_resets(&self) -> usize {
        match self {
            Controller::Hmm(c) => c.filter_resets(),
            _ => 0,
        }
    }
}

fn gain_matrix(cfg: &ExperimentConfig) -> DMatrix<f64> {
    let g = cfg.gain_entries();
    let (rows, cols) = (cfg.env.control_dim(), cfg.env.state_dim());
    let mut k = DMatrix::zeros(rows, cols);
    for (i, v) in g.iter().enumerate() {
        k[(i.min(rows - 1), i)] = *v;
    }
    k
}

/// Controller prototype cloned by every trial.
enum Prototype<'a> {
    Hmm(HmmController),
    Fhmm(FhmmController),
    Vi(&'a PendulumVi),
}

fn prototype<'a>(cfg: &ExperimentConfig, trained: Option<&Trained>, solved: &'a Solved) -> Result<Prototype<'a>, HarnessError> {
    let gain = gain_matrix(cfg);
    Ok(match (&solved.policy, trained.map(|t| &t.model)) {
        (Policy::Vi { vi }, _) => Prototype::Vi(vi),
        (Policy::Latent { solution }, Some(TrainedModel::Hmm { model })) => {
            // the learned initial law reflects where training segments began,
            // not where episodes begin
            let ctl = HmmController::from_solution(model.with_uniform_initial(), solution.clone(), gain)
                .and_then(|c| c.with_periods(cfg.periods()))
                .map_err(numerical)?;
            Prototype::Hmm(ctl)
        }
        (Policy::Latent { solution }, Some(TrainedModel::Fhmm { model })) => {
            let flat = flatten_to_hmm(&model.with_uniform_initials(), cfg.solver.caps.exact_states).map_err(numerical)?;
            Prototype::Hmm(HmmController::from_solution(flat, solution.clone(), gain).map_err(numerical)?)
        }
        (Policy::Factored { policy }, Some(TrainedModel::Fhmm { model })) => {
            let sweeps = match cfg.model {
                ModelConfig::Fhmm { sweeps, .. } => sweeps,
                _ => SmfOptions::default().n_sweeps,
            };
            let smf = SmfOptions { n_sweeps: sweeps, ..Default::default() };
            let ctl = FhmmController::new(model.with_uniform_initials(), policy.clone(), gain, cfg.window(), cfg.control.samples, smf, cfg.seed)
                .map_err(solve_error)?;
            Prototype::Fhmm(ctl)
        }
        _ => return Err(HarnessError::Config("policy does not match the model".into())),
    })
}

/// One closed-loop episode.
fn episode(cfg: &ExperimentConfig, proto: &Prototype, trial: usize) -> Result<EpisodeReport, HarnessError> {
    let seed = trial_seed(cfg.seed, trial);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = random_start(&cfg.env, cfg.control.start_box.as_deref(), &mut rng).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut ctl = match proto {
        Prototype::Hmm(c) => Controller::Hmm(Box::new(c.clone())),
        Prototype::Fhmm(c) => {
            let mut c = c.clone();
            c.reset(seed);
            Controller::Fhmm(Box::new(c))
        }
        Prototype::Vi(vi) => match &cfg.env {
            Env::Pendulum(p) => Controller::Vi(ViController::new(vi, p.clone())),
            _ => return Err(HarnessError::Config("value iteration needs the pendulum".into())),
        },
    };
    let len = cfg.control.episode_len;
    let mut states = Vec::with_capacity(len + 1);
    let mut controls = Vec::with_capacity(len);
    let mut costs = Vec::with_capacity(len + 1);
    let mut y = y0;
    let start = Instant::now();
    for _ in 0..len {
        let tau = ctl.step(&y)?;
        if tau.iter().any(|v| !v.is_finite()) {
            return Err(HarnessError::Numerical(format!("trial {trial}: non-finite control")));
        }
        let next = cfg.env.step(&y, &tau);
        costs.push(cfg.env.task_cost(&y));
        states.push(std::mem::replace(&mut y, next));
        controls.push(tau);
    }
    let control_seconds = start.elapsed().as_secs_f64();
    costs.push(cfg.env.task_cost(&y));
    states.push(y);
    let m = episode_metrics(cfg, &states, &controls);
    Ok(EpisodeReport {
        trial,
        seed,
        states,
        controls,
        costs,
        metric: m.metric,
        collisions: m.collisions,
        success: m.success,
        filter_resets: ctl.filter_resets(),
        control_seconds,
    })
}

pub fn run(cfg: &ExperimentConfig, trained: Option<&Trained>, solved: &Solved) -> Result<RunReport, HarnessError> {
    let start = Instant::now();
    let proto = prototype(cfg, trained, solved)?;
    let episodes = par_map(cfg.control.trials, |i| episode(cfg, &proto, i)).into_iter().collect::<Result<Vec<_>, _>>()?;
    let summary = Summary::of(cfg, &episodes);
    Ok(RunReport {
        format_version: crate::format::FORMAT_VERSION,
        env: cfg.env.tag().into(),
        solver: solved.solver.name().into(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        root_seed: cfg.seed,
        objective_trace: solved.trace.clone(),
        summary,
        timings: Timings {
            train_seconds: trained.map_or(0.0, |t| t.seconds),
            solve_seconds: solved.seconds,
            run_seconds: start.elapsed().as_secs_f64(),
        },
        episodes,
    })
}
