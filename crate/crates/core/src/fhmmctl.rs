//! Latent KL control on factorial HMMs: the exact solver on the flattened
//! chain, variational coordinate descent over per-chain policies (VKL), its
//! mean-substitution approximation (AVKL), and the sampled observed-space
//! control loop.

use std::collections::VecDeque;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fhmm::{decode_joint, windowed_filter, Anchor, FactorialHmm, FhmmError, SmfOptions};
use crate::format::dmatrix;
use crate::hmmctl::QuadraticCost;
use crate::klcore::{solve_power_iteration, stationary_distribution, KlError, KlProblem, KlSolution, Transition};
use crate::linalg::{kl_divergence, sample_index, CsrMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("{solver}: {required} exceeds the cap of {cap}")]
    CapExceeded { solver: &'static str, required: usize, cap: usize },
    #[error("VKL objective increased by {increase:e} at outer iteration {outer}, chain {chain}")]
    CostIncrease { outer: usize, chain: usize, increase: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kl(#[from] KlError),
    #[error(transparent)]
    Fhmm(#[from] FhmmError),
}

/// Scaled observation-space cost `α q̃(y)`.
pub trait ObservationCost {
    fn cost(&self, y: &[f64]) -> f64;
}

/// The continuous costs used with factorial models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentCostSpec {
    /// `α · ½ (y − μ_q)ᵀ Σ_q⁻¹ (y − μ_q)`.
    Quadratic(QuadraticCost),
    /// `α · ‖target − T(y)‖` with `T` the planar unit-link forward kinematics.
    Reaching { target: [f64; 2], scale: f64 },
}

impl LatentCostSpec {
    pub fn scale(&self) -> f64 {
        match self {
            LatentCostSpec::Quadratic(q) => q.scale(),
            LatentCostSpec::Reaching { scale, .. } => *scale,
        }
    }
}

impl ObservationCost for LatentCostSpec {
    fn cost(&self, y: &[f64]) -> f64 {
        match self {
            LatentCostSpec::Quadratic(q) => q.evaluate(&DVector::from_column_slice(y)),
            LatentCostSpec::Reaching { target, scale } => {
                if *scale == 0.0 {
                    return 0.0;
                }
                let (mut x, mut z, mut angle) = (0.0, 0.0, 0.0);
                for q in y {
                    angle += q;
                    x += angle.cos();
                    z += angle.sin();
                }
                scale * ((target[0] - x).powi(2) + (target[1] - z).powi(2)).sqrt()
            }
        }
    }
}

/// Feasibility guards for the solvers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverCaps {
    /// Largest `K^M` the exact solver flattens.
    pub exact_states: usize,
    /// Largest `K^(M−1)` cost evaluations per VKL chain update.
    pub vkl_evaluations: usize,
    /// Largest `K^M` for which AVKL evaluates the exact objective instead of
    /// the surrogate.
    pub exact_objective: usize,
}

impl Default for SolverCaps {
    fn default() -> Self {
        Self { exact_states: crate::fhmm::DEFAULT_FLATTEN_CAP, vkl_evaluations: 1_000_000, exact_objective: 1_000_000 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FactoredOptions {
    pub max_outer: usize,
    /// Stop once an outer iteration lowers the objective by less than this.
    pub tol: f64,
    /// Tolerance of every per-chain eigenproblem.
    pub eig_tol: f64,
    pub caps: SolverCaps,
}

impl Default for FactoredOptions {
    fn default() -> Self {
        Self { max_outer: 50, tol: 1e-8, eig_tol: 1e-10, caps: SolverCaps::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// `Σ_x Π(x) [q(x) + Σ_m KL_m(x^(m))]` evaluated exactly.
    Exact,
    /// `q(Σ_m W^(m) Π^(m)) + Σ_m Π^(m)·KL_m`.
    Surrogate,
}

/// Product of per-chain control laws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactoredPolicy {
    pub solver: String,
    pub laws: Vec<CsrMatrix>,
    pub stationary: Vec<Vec<f64>>,
    /// `KL(u^(m)(·|k) ‖ P^(m)(·|k))` per chain and value.
    pub chain_kl: Vec<Vec<f64>>,
    pub objective: ObjectiveKind,
    /// Objective before the first update and after every outer iteration.
    pub trace: Vec<f64>,
    /// Objective after every single chain update.
    pub chain_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Cost evaluations spent in each chain update.
    pub evaluations_per_update: Vec<usize>,
}

impl FactoredPolicy {
    /// Objective value of the returned policy.
    pub fn expected_cost(&self) -> f64 {
        *self.trace.last().expect("trace holds the initial objective")
    }

    /// The uncontrolled laws, with their stationary distributions.
    pub fn uncontrolled(model: &FactorialHmm) -> Result<Self, SolveError> {
        let laws = model.transitions().to_vec();
        let stationary = laws
            .iter()
            .map(|l| stationary_distribution(&Transition::sparse(l.clone()), 1e-12))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            solver: "uncontrolled".into(),
            chain_kl: vec![vec![0.0; model.n_values()]; model.n_chains()],
            laws,
            stationary,
            objective: ObjectiveKind::Exact,
            trace: vec![],
            chain_trace: vec![],
            iterations: 0,
            converged: true,
            evaluations_per_update: vec![],
        })
    }
}

/// Columns `W^(m) e_k` as `[m][k][d]`.
fn columns(model: &FactorialHmm) -> Vec<Vec<Vec<f64>>> {
    model
        .weights()
        .iter()
        .map(|w| (0..w.ncols()).map(|k| w.column(k).iter().copied().collect()).collect())
        .collect()
}

/// `q` at every joint state, chain 0 fastest-varying.
pub fn joint_costs<C: ObservationCost + ?Sized>(model: &FactorialHmm, cost: &C, cap: usize) -> Result<Vec<f64>, SolveError> {
    let (m, k) = (model.n_chains(), model.n_values());
    let states = k
        .checked_pow(m as u32)
        .filter(|&s| s <= cap)
        .ok_or(SolveError::CapExceeded { solver: "exact", required: k.saturating_pow(m as u32), cap })?;
    let cols = columns(model);
    let d = model.dim();
    let mut y = vec![0.0; d];
    Ok((0..states)
        .map(|i| {
            y.iter_mut().for_each(|v| *v = 0.0);
            for (c, v) in decode_joint(i, m, k).into_iter().enumerate() {
                for (a, b) in y.iter_mut().zip(&cols[c][v]) {
                    *a += b;
                }
            }
            cost.cost(&y)
        })
        .collect())
}

/// Latent problem on the `K^M` flattened chain.
pub fn exact_problem<C: ObservationCost + ?Sized>(model: &FactorialHmm, cost: &C, cap: usize) -> Result<KlProblem, SolveError> {
    let costs = joint_costs(model, cost, cap)?;
    let transition = if model.n_chains() == 1 {
        Transition::sparse(model.transitions()[0].clone())
    } else {
        Transition::kronecker(model.transitions().to_vec())
    };
    Ok(KlProblem::new(transition, costs, 1.0)?)
}

/// Exact latent control on the flattened chain.
pub fn solve_exact<C: ObservationCost + ?Sized>(
    model: &FactorialHmm,
    cost: &C,
    cap: usize,
    tol: f64,
    max_iter: usize,
) -> Result<KlSolution, SolveError> {
    let problem = exact_problem(model, cost, cap)?;
    Ok(solve_power_iteration(&problem, tol, max_iter)?)
}

/// Solves one chain's subproblem: returns (law, stationary, per-value KL).
fn chain_update(
    base: &CsrMatrix,
    chain_cost: &[f64],
    eig_tol: f64,
) -> Result<(CsrMatrix, Vec<f64>, Vec<f64>), SolveError> {
    // constant offsets only rescale λ; shifting to min 0 keeps costs valid
    let lo = chain_cost.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = chain_cost.iter().map(|c| c - lo).collect();
    let problem = KlProblem::new(Transition::sparse(base.clone()), shifted, 1.0)?;
    let sol = solve_power_iteration(&problem, eig_tol, 10_000_000)?;
    let law = sol.optimal_control.to_sparse();
    let stationary = stationary_distribution(&Transition::sparse(law.clone()), 1e-12)?;
    let kl = (0..base.n_rows)
        .map(|i| {
            let u: Vec<(usize, f64)> = law.row(i).collect();
            let p: Vec<(usize, f64)> = base.row(i).collect();
            kl_divergence(&u, &p)
        })
        .collect();
    Ok((law, stationary, kl))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact `Σ_x Π(x) q(x)` under a product distribution.
fn exact_state_cost<C: ObservationCost + ?Sized>(model: &FactorialHmm, cost: &C, stationary: &[Vec<f64>]) -> f64 {
    let (m, k) = (model.n_chains(), model.n_values());
    let cols = columns(model);
    let mut y = vec![0.0; model.dim()];
    let mut total = 0.0;
    for i in 0..k.pow(m as u32) {
        let values = decode_joint(i, m, k);
        let w: f64 = values.iter().enumerate().map(|(c, &v)| stationary[c][v]).product();
        if w == 0.0 {
            continue;
        }
        y.iter_mut().for_each(|v| *v = 0.0);
        for (c, &v) in values.iter().enumerate() {
            for (a, b) in y.iter_mut().zip(&cols[c][v]) {
                *a += b;
            }
        }
        total += w * cost.cost(&y);
    }
    total
}

/// `Q^(m)(k) = Σ_{x^{−m}} Π_{i≠m} Π^(i)(x^(i)) q(x^{−m}, k)`, by enumeration.
fn marginal_cost<C: ObservationCost + ?Sized>(
    model: &FactorialHmm,
    cost: &C,
    cols: &[Vec<Vec<f64>>],
    stationary: &[Vec<f64>],
    chain: usize,
) -> (Vec<f64>, usize) {
    let (m, k, d) = (model.n_chains(), model.n_values(), model.dim());
    let others = k.pow(m as u32 - 1);
    let mut q = vec![0.0; k];
    let mut base = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut evaluations = 0;
    for i in 0..others {
        let values = decode_joint(i, m - 1, k);
        let mut w = 1.0;
        base.iter_mut().for_each(|v| *v = 0.0);
        for (slot, &v) in values.iter().enumerate() {
            let c = if slot < chain { slot } else { slot + 1 };
            w *= stationary[c][v];
            for (a, b) in base.iter_mut().zip(&cols[c][v]) {
                *a += b;
            }
        }
        if w == 0.0 {
            continue;
        }
        for (v, qv) in q.iter_mut().enumerate() {
            for ((a, b), c) in y.iter_mut().zip(&base).zip(&cols[chain][v]) {
                *a = b + c;
            }
            *qv += w * cost.cost(&y);
            evaluations += 1;
        }
    }
    (q, evaluations)
}

/// `Q^(m)(k) = q(W^(m) e_k + Σ_{i≠m} W^(i) Π^(i))`.
fn mean_substituted_cost<C: ObservationCost + ?Sized>(
    model: &FactorialHmm,
    cost: &C,
    cols: &[Vec<Vec<f64>>],
    stationary: &[Vec<f64>],
    chain: usize,
) -> Vec<f64> {
    let d = model.dim();
    let mut base = vec![0.0; d];
    for (c, w) in model.weights().iter().enumerate() {
        if c == chain {
            continue;
        }
        let mean = w * DVector::from_column_slice(&stationary[c]);
        for (a, b) in base.iter_mut().zip(mean.iter()) {
            *a += b;
        }
    }
    let mut y = vec![0.0; d];
    (0..model.n_values())
        .map(|v| {
            for ((a, b), c) in y.iter_mut().zip(&base).zip(&cols[chain][v]) {
                *a = b + c;
            }
            cost.cost(&y)
        })
        .collect()
}

/// `q(Σ_m W^(m) Π^(m)) + Σ_m Π^(m)·KL_m`.
fn surrogate_objective<C: ObservationCost + ?Sized>(
    model: &FactorialHmm,
    cost: &C,
    stationary: &[Vec<f64>],
    chain_kl: &[Vec<f64>],
) -> f64 {
    let mut mean = DVector::zeros(model.dim());
    for (w, s) in model.weights().iter().zip(stationary) {
        mean += w * DVector::from_column_slice(s);
    }
    cost.cost(mean.as_slice()) + stationary.iter().zip(chain_kl).map(|(s, kl)| dot(s, kl)).sum::<f64>()
}

fn initial_state(model: &FactorialHmm) -> Result<FactoredPolicy, SolveError> {
    FactoredPolicy::uncontrolled(model)
}

/// Variational KL minimization: coordinate descent over per-chain laws with
/// the exact marginal cost of each chain.
pub fn solve_vkl<C: ObservationCost + ?Sized>(
    model: &FactorialHmm,
    cost: &C,
    opts: FactoredOptions,
) -> Result<FactoredPolicy, SolveError> {
    let (m, k) = (model.n_chains(), model.n_values());
    let per_update = k.checked_pow(m as u32 - 1).unwrap_or(usize::MAX);
    if per_update > opts.caps.vkl_evaluations {
        return Err(SolveError::CapExceeded { solver: "vkl", required: per_update, cap: opts.caps.vkl_evaluations });
    }
    let cols = columns(model);
    let mut policy = initial_state(model)?;
    policy.solver = "vkl".into();
    policy.converged = false;
    let kl_total = |p: &FactoredPolicy| -> f64 { p.stationary.iter().zip(&p.chain_kl).map(|(s, kl)| dot(s, kl)).sum() };
    let mut current = f64::NAN;
    for outer in 1..=opts.max_outer {
        for chain in 0..m {
            let (q, evals) = marginal_cost(model, cost, &cols, &policy.stationary, chain);
            if policy.trace.is_empty() {
                current = dot(&policy.stationary[chain], &q) + kl_total(&policy);
                policy.trace.push(current);
            }
            let (law, stationary, kl) = chain_update(&model.transitions()[chain], &q, opts.eig_tol)?;
            policy.laws[chain] = law;
            policy.stationary[chain] = stationary;
            policy.chain_kl[chain] = kl;
            policy.evaluations_per_update.push(evals);
            let next = dot(&policy.stationary[chain], &q) + kl_total(&policy);
            let increase = next - current;
            if increase > 1e-8 * current.abs().max(1.0) {
                return Err(SolveError::CostIncrease { outer, chain, increase });
            }
            current = next;
            policy.chain_trace.push(current);
        }
        policy.iterations = outer;
        let prev = *policy.trace.last().expect("initial objective recorded");
        policy.trace.push(current);
        if prev - current < opts.tol {
            policy.converged = true;
            break;
        }
    }
    Ok(policy)
}

/// AVKL: each chain's cost is evaluated with the other chains replaced by
/// their stationary mean contributions, `K` evaluations per chain update.
pub fn solve_avkl<C: ObservationCost + ?Sized>(
    model: &FactorialHmm,
    cost: &C,
    opts: FactoredOptions,
) -> Result<FactoredPolicy, SolveError> {
    let (m, k) = (model.n_chains(), model.n_values());
    let exact = k.checked_pow(m as u32).is_some_and(|s| s <= opts.caps.exact_objective);
    let cols = columns(model);
    let mut policy = initial_state(model)?;
    policy.solver = "avkl".into();
    policy.converged = false;
    policy.objective = if exact { ObjectiveKind::Exact } else { ObjectiveKind::Surrogate };
    info!("AVKL objective: {:?}", policy.objective);
    let objective = |p: &FactoredPolicy| -> f64 {
        if exact {
            exact_state_cost(model, cost, &p.stationary)
                + p.stationary.iter().zip(&p.chain_kl).map(|(s, kl)| dot(s, kl)).sum::<f64>()
        } else {
            surrogate_objective(model, cost, &p.stationary, &p.chain_kl)
        }
    };
    policy.trace.push(objective(&policy));
    for outer in 1..=opts.max_outer {
        for chain in 0..m {
            let q = mean_substituted_cost(model, cost, &cols, &policy.stationary, chain);
            let (law, stationary, kl) = chain_update(&model.transitions()[chain], &q, opts.eig_tol)?;
            policy.laws[chain] = law;
            policy.stationary[chain] = stationary;
            policy.chain_kl[chain] = kl;
            policy.evaluations_per_update.push(k);
        }
        policy.iterations = outer;
        let prev = *policy.trace.last().expect("initial objective recorded");
        let current = objective(&policy);
        policy.chain_trace.push(current);
        policy.trace.push(current);
        if current > prev + 1e-8 * prev.abs().max(1.0) {
            warn!("AVKL objective rose from {prev} to {current} at outer iteration {outer}");
        }
        if (prev - current).abs() < opts.tol {
            policy.converged = true;
            break;
        }
    }
    Ok(policy)
}

/// Estimate of `Σ_x Π(x) [q(x) + Σ_m KL_m(x^(m))]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub value: f64,
    /// Zero for exact evaluation.
    pub std_error: f64,
    pub exact: bool,
}

/// Expected cost of a factored policy: exact when `K^M ≤ budget`, otherwise
/// Monte Carlo over the product stationary distribution for the state-cost
/// part (the KL part is always exact).
pub fn expected_cost<C: ObservationCost + ?Sized>(
    model: &FactorialHmm,
    cost: &C,
    policy: &FactoredPolicy,
    budget: usize,
    samples: usize,
    seed: u64,
) -> CostEstimate {
    let (m, k) = (model.n_chains(), model.n_values());
    let kl: f64 = policy.stationary.iter().zip(&policy.chain_kl).map(|(s, kl)| dot(s, kl)).sum();
    if k.checked_pow(m as u32).is_some_and(|s| s <= budget) {
        return CostEstimate { value: exact_state_cost(model, cost, &policy.stationary) + kl, std_error: 0.0, exact: true };
    }
    let cols = columns(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = vec![0.0; model.dim()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let n = samples.max(2);
    for _ in 0..n {
        y.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..m {
            let v = sample_index(&policy.stationary[c], rng.gen());
            for (a, b) in y.iter_mut().zip(&cols[c][v]) {
                *a += b;
            }
        }
        let q = cost.cost(&y);
        sum += q;
        sum_sq += q * q;
    }
    let mean = sum / n as f64;
    let var = ((sum_sq - n as f64 * mean * mean) / (n as f64 - 1.0)).max(0.0);
    CostEstimate { value: mean + kl, std_error: (var / n as f64).sqrt(), exact: false }
}

/// Observed-space controller for a factorial model and a factored policy.
///
/// Each step filters the last `H` observations from a factored anchor with
/// the policy laws, propagates every chain one step under the policy and
/// under the uncontrolled law, and compares the two sample means of
/// `Σ_m W^(m) x̂^(m)` drawn with common random numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FhmmController {
    model: FactorialHmm,
    policy: FactoredPolicy,
    #[serde(with = "dmatrix")]
    gain: DMatrix<f64>,
    window: usize,
    samples: usize,
    n_sweeps: usize,
    sweep_tol: f64,
    seed: u64,
    #[serde(skip)]
    state: Option<LoopState>,
}

#[derive(Debug, Clone)]
struct LoopState {
    buffer: VecDeque<DVector<f64>>,
    anchor: Anchor,
    rng: ChaCha8Rng,
}

/// Quantities computed in one control step.
#[derive(Debug, Clone)]
pub struct FhmmStep {
    pub control: DVector<f64>,
    pub predicted_controlled: DVector<f64>,
    pub predicted_uncontrolled: DVector<f64>,
    pub filtered: Vec<Vec<f64>>,
}

impl FhmmController {
    pub fn new(
        model: FactorialHmm,
        policy: FactoredPolicy,
        gain: DMatrix<f64>,
        window: usize,
        samples: usize,
        smf: SmfOptions,
        seed: u64,
    ) -> Result<Self, SolveError> {
        if window == 0 || samples == 0 {
            return Err(SolveError::Invalid("window and sample count must be positive".into()));
        }
        if gain.ncols() != model.dim() {
            return Err(SolveError::Invalid(format!("gain has {} columns, expected {}", gain.ncols(), model.dim())));
        }
        if policy.laws.len() != model.n_chains() {
            return Err(SolveError::Invalid("policy does not match the model".into()));
        }
        Ok(Self {
            model,
            policy,
            gain,
            window,
            samples,
            n_sweeps: smf.n_sweeps,
            sweep_tol: smf.tol,
            seed,
            state: None,
        })
    }

    pub fn policy(&self) -> &FactoredPolicy {
        &self.policy
    }

    pub fn model(&self) -> &FactorialHmm {
        &self.model
    }

    /// Restarts the filter and the sampling stream.
    pub fn reset(&mut self, seed: u64) {
        self.seed = seed;
        self.state = None;
    }

    pub fn step_detailed(&mut self, observation: &DVector<f64>) -> Result<FhmmStep, SolveError> {
        let seed = self.seed;
        let initials = self.model.initials().to_vec();
        let state = self.state.get_or_insert_with(|| LoopState {
            buffer: VecDeque::new(),
            anchor: Anchor::Prior(initials),
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
        state.buffer.push_back(observation.clone());
        if state.buffer.len() > self.window {
            state.buffer.pop_front();
        }
        let window: Vec<DVector<f64>> = state.buffer.iter().cloned().collect();
        let smf = SmfOptions { n_sweeps: self.n_sweeps, tol: self.sweep_tol };
        let res = windowed_filter(&self.model, &self.policy.laws, &state.anchor, &window, smf)?;
        if state.buffer.len() == self.window {
            state.anchor = res.next_anchor.clone();
        }

        let next_u: Vec<Vec<f64>> = res.marginals.iter().zip(&self.policy.laws).map(|(g, l)| l.tr_mul_vec(g)).collect();
        let next_p: Vec<Vec<f64>> =
            res.marginals.iter().zip(self.model.transitions()).map(|(g, l)| l.tr_mul_vec(g)).collect();
        let d = self.model.dim();
        let (mut y_u, mut y_p) = (DVector::zeros(d), DVector::zeros(d));
        for _ in 0..self.samples {
            for c in 0..self.model.n_chains() {
                let r: f64 = state.rng.gen();
                let w = &self.model.weights()[c];
                y_u += w.column(sample_index(&next_u[c], r));
                y_p += w.column(sample_index(&next_p[c], r));
            }
        }
        y_u /= self.samples as f64;
        y_p /= self.samples as f64;
        let control = &self.gain * (&y_u - &y_p);
        Ok(FhmmStep { control, predicted_controlled: y_u, predicted_uncontrolled: y_p, filtered: res.marginals })
    }

    pub fn control_step(&mut self, observation: &DVector<f64>) -> Result<DVector<f64>, SolveError> {
        Ok(self.step_detailed(observation)?.control)
    }
}
