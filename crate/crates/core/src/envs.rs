//! Simulated control-affine environments `y' = y + Δt (f(y) + B(y) τ)`,
//! exploration rollouts and the trajectory file format.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumEnv {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub damping: f64,
    pub torque_max: f64,
    pub max_speed: f64,
    pub dt: f64,
}

impl Default for PendulumEnv {
    fn default() -> Self {
        Self { mass: 1.0, length: 1.0, gravity: 9.8, damping: 0.25, torque_max: 5.0, max_speed: 4.0 * PI, dt: DEFAULT_DT }
    }
}

impl PendulumEnv {
    /// `½ m l² ω² + m g l cos θ`, with `θ = 0` upright.
    pub fn energy(&self, y: &[f64]) -> f64 {
        let ml = self.mass * self.length;
        0.5 * ml * self.length * y[1] * y[1] + ml * self.gravity * y[0].cos()
    }

    pub fn step(&self, y: &[f64], tau: f64) -> Vec<f64> {
        let tau = tau.clamp(-self.torque_max, self.torque_max);
        let inertia = self.mass * self.length * self.length;
        let acc = self.gravity / self.length * y[0].sin() - self.damping / inertia * y[1] + tau / inertia;
        let theta = wrap_angle(y[0] + self.dt * y[1]);
        let omega = (y[1] + self.dt * acc).clamp(-self.max_speed, self.max_speed);
        vec![theta, omega]
    }
}

/// Wraps to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Disc obstacle in the workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disc {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Planar two-link arm with unit links, velocity control and a disc obstacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoLinkArmEnv {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
    pub obstacle: Disc,
    pub dt: f64,
}

impl Default for TwoLinkArmEnv {
    fn default() -> Self {
        Self { lower: [-PI, -PI], upper: [PI, PI], obstacle: Disc { center: [1.75, 0.35], radius: 0.25 }, dt: DEFAULT_DT }
    }
}

impl TwoLinkArmEnv {
    /// Base, elbow and tip positions.
    pub fn joints(y: &[f64]) -> [[f64; 2]; 3] {
        let elbow = [y[0].cos(), y[0].sin()];
        let a = y[0] + y[1];
        [[0.0, 0.0], elbow, [elbow[0] + a.cos(), elbow[1] + a.sin()]]
    }

    /// Whether a link segment enters the open obstacle disc.
    pub fn collides(&self, y: &[f64]) -> bool {
        let p = Self::joints(y);
        let r = self.obstacle.radius;
        segment_distance(p[0], p[1], self.obstacle.center) < r || segment_distance(p[1], p[2], self.obstacle.center) < r
    }

    pub fn within_limits(&self, y: &[f64]) -> bool {
        (0..2).all(|i| y[i] >= self.lower[i] && y[i] <= self.upper[i])
    }

    pub fn admissible(&self, y: &[f64]) -> bool {
        self.within_limits(y) && !self.collides(y)
    }

    /// Next state and whether the move was rejected.
    pub fn step_checked(&self, y: &[f64], tau: &[f64]) -> (Vec<f64>, bool) {
        let next: Vec<f64> = y.iter().zip(tau).map(|(q, t)| q + self.dt * t).collect();
        if self.admissible(&next) {
            (next, false)
        } else {
            (y.to_vec(), true)
        }
    }
}

/// Distance from `c` to the segment `a`–`b`.
pub fn segment_distance(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ac = [c[0] - a[0], c[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let s = if len2 > 0.0 { ((ac[0] * ab[0] + ac[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = [ac[0] - s * ab[0], ac[1] - s * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// Planar arm with `J` unit links and joint limits `±π/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReachArmEnv {
    pub joints: usize,
    pub target: [f64; 2],
    pub dt: f64,
}

impl ReachArmEnv {
    pub const LIMIT: f64 = PI / 2.0;

    pub fn new(joints: usize, target: [f64; 2], dt: f64) -> Result<Self, EnvError> {
        if joints == 0 {
            return Err(EnvError::Invalid("reach arm needs at least one joint".into()));
        }
        if target[0].hypot(target[1]) > joints as f64 {
            return Err(EnvError::Invalid(format!("target {target:?} is out of reach")));
        }
        Ok(Self { joints, target, dt })
    }
}

/// End-effector position of a planar chain of unit links.
pub fn forward_kinematics(angles: &[f64]) -> [f64; 2] {
    let (mut x, mut z, mut a) = (0.0, 0.0, 0.0);
    for q in angles {
        a += q;
        x += a.cos();
        z += a.sin();
    }
    [x, z]
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment: {0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}, line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Env {
    Pendulum(PendulumEnv),
    Arm(TwoLinkArmEnv),
    Reach(ReachArmEnv),
}

/// Task cost weights for the quadratic tasks, as `diag(Σ_q)`.
pub const PENDULUM_COST_DIAG: [f64; 2] = [0.005, 0.02];
pub const ARM_COST_DIAG: [f64; 2] = [0.01, 0.01];
pub const ARM_START: [f64; 2] = [PI / 2.0, -PI / 2.0];
pub const ARM_GOAL: [f64; 2] = [-PI / 2.0, PI / 2.0];

impl Env {
    pub fn tag(&self) -> &'static str {
        match self {
            Env::Pendulum(_) => "pendulum",
            Env::Arm(_) => "arm",
            Env::Reach(_) => "reach",
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            Env::Pendulum(e) => e.dt,
            Env::Arm(e) => e.dt,
            Env::Reach(e) => e.dt,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Env::Pendulum(_) | Env::Arm(_) => 2,
            Env::Reach(e) => e.joints,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            Env::Pendulum(_) => 1,
            Env::Arm(_) => 2,
            Env::Reach(e) => e.joints,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let dt = self.dt();
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(EnvError::Invalid(format!("dt must be positive, got {dt}")));
        }
        match self {
            Env::Pendulum(p) => {
                if !(p.mass > 0.0 && p.length > 0.0 && p.damping >= 0.0 && p.torque_max > 0.0 && p.max_speed > 0.0) {
                    return Err(EnvError::Invalid("pendulum parameters must be positive".into()));
                }
                if p.torque_max >= p.mass * p.gravity * p.length {
                    return Err(EnvError::Invalid("torque limit must be below m g l".into()));
                }
            }
            Env::Arm(a) => {
                if !(a.obstacle.radius > 0.0) || (0..2).any(|i| a.lower[i] >= a.upper[i]) {
                    return Err(EnvError::Invalid("arm limits or obstacle radius are invalid".into()));
                }
            }
            Env::Reach(r) => {
                ReachArmEnv::new(r.joints, r.target, r.dt)?;
            }
        }
        Ok(())
    }

    pub fn admissible(&self, y: &[f64]) -> bool {
        if y.len() != self.state_dim() || y.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self {
            Env::Pendulum(p) => y[0] > -PI && y[0] <= PI && y[1].abs() <= p.max_speed,
            Env::Arm(a) => a.admissible(y),
            Env::Reach(_) => y.iter().all(|q| q.abs() <= ReachArmEnv::LIMIT),
        }
    }

    /// One Euler step followed by wrapping, clamping or rejection.
    pub fn step(&self, y: &[f64], tau: &[f64]) -> Vec<f64> {
        match self {
            Env::Pendulum(p) => p.step(y, tau[0]),
            Env::Arm(a) => a.step_checked(y, tau).0,
            Env::Reach(r) => {
                y.iter().zip(tau).map(|(q, t)| (q + r.dt * t).clamp(-ReachArmEnv::LIMIT, ReachArmEnv::LIMIT)).collect()
            }
        }
    }

    /// Pendulum: `yᵀ Σ_q⁻¹ y`; arm: `(y − g)ᵀ Σ_q⁻¹ (y − g)`; reach: `‖t − T(y)‖`.
    pub fn task_cost(&self, y: &[f64]) -> f64 {
        match self {
            Env::Pendulum(_) => y[0] * y[0] / PENDULUM_COST_DIAG[0] + y[1] * y[1] / PENDULUM_COST_DIAG[1],
            Env::Arm(_) => (0..2).map(|i| (y[i] - ARM_GOAL[i]).powi(2) / ARM_COST_DIAG[i]).sum(),
            Env::Reach(r) => {
                let tip = forward_kinematics(y);
                (r.target[0] - tip[0]).hypot(r.target[1] - tip[1])
            }
        }
    }

    /// Uniformly random admissible state.
    pub fn random_state(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Env::Pendulum(p) => vec![wrap_angle(rng.gen_range(-PI..PI)), rng.gen_range(-p.max_speed..p.max_speed)],
            Env::Arm(a) => loop {
                let y: Vec<f64> = (0..2).map(|i| rng.gen_range(a.lower[i]..a.upper[i])).collect();
                if a.admissible(&y) {
                    break y;
                }
            },
            Env::Reach(r) => (0..r.joints).map(|_| rng.gen_range(-ReachArmEnv::LIMIT..=ReachArmEnv::LIMIT)).collect(),
        }
    }
}

/// Exploration rollout settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreOptions {
    /// Total number of records.
    pub steps: usize,
    /// Isotropic exploration variance `σ_ε²`.
    pub noise_var: f64,
    /// Restart from a fresh random state every this many steps (0: never).
    pub segment_len: usize,
    /// Fixed initial state of the first segment; random when absent.
    pub initial: Option<Vec<f64>>,
    /// Per-dimension `[low, high]` box for random segment starts, intersected
    /// with the admissible set; the whole admissible set when absent.
    #[serde(default)]
    pub start_box: Option<Vec<[f64; 2]>>,
}

/// Recorded rollout: `states[t]` and the control `controls[t]` applied at it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub env: Env,
    pub seed: u64,
    pub noise_var: f64,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// Segment index of every record; transitions only occur within a segment.
    pub segments: Vec<usize>,
}

pub const TRAJECTORY_HEADER: &str = "# latent-kl trajectory v1";

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.env.dt()
    }

    /// States split into contiguous segments.
    pub fn sequences(&self) -> Vec<Vec<DVector<f64>>> {
        let mut out: Vec<Vec<DVector<f64>>> = Vec::new();
        for (i, y) in self.states.iter().enumerate() {
            if i == 0 || self.segments[i] != self.segments[i - 1] {
                out.push(Vec::new());
            }
            out.last_mut().expect("segment started").push(DVector::from_column_slice(y));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{TRAJECTORY_HEADER}").unwrap();
        writeln!(s, "# env {}", serde_json::to_string(&self.env).expect("env serializes")).unwrap();
        writeln!(s, "# seed {}", self.seed).unwrap();
        writeln!(s, "# dt {}", self.dt()).unwrap();
        writeln!(s, "# noise_var {}", self.noise_var).unwrap();
        writeln!(s, "# length {}", self.len()).unwrap();
        writeln!(s, "# columns t segment y[{}] tau[{}]", self.env.state_dim(), self.env.control_dim()).unwrap();
        for (t, ((y, u), seg)) in self.states.iter().zip(&self.controls).zip(&self.segments).enumerate() {
            write!(s, "{t} {seg}").unwrap();
            for v in y.iter().chain(u) {
                write!(s, " {v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, path: &str) -> Result<Self, EnvError> {
        let err = |line: usize, message: String| EnvError::Parse { path: path.into(), line, message };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == TRAJECTORY_HEADER => {}
            _ => return Err(err(1, "missing trajectory header".into())),
        }
        let (mut env, mut seed, mut noise_var, mut length) = (None, None, None, None);
        let mut states = Vec::new();
        let mut controls = Vec::new();
        let mut segments = Vec::new();
        for (i, line) in lines {
            let n = i + 1;
            if let Some(rest) = line.strip_prefix("# ") {
                let (key, value) = rest.split_once(' ').unwrap_or((rest, ""));
                match key {
                    "env" => env = Some(serde_json::from_str::<Env>(value).map_err(|e| err(n, e.to_string()))?),
                    "seed" => seed = Some(value.parse::<u64>().map_err(|e| err(n, e.to_string()))?),
                    "noise_var" => noise_var = Some(value.parse::<f64>().map_err(|e| err(n, e.to_string()))?),
                    "length" => length = Some(value.parse::<usize>().map_err(|e| err(n, e.to_string()))?),
                    "dt" | "columns" => {}
                    other => return Err(err(n, format!("unknown header key {other:?}"))),
                }
                continue;
            }
            let env = env.as_ref().ok_or_else(|| err(n, "record before env header".into()))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            let (ds, dc) = (env.state_dim(), env.control_dim());
            if fields.len() != 2 + ds + dc {
                return Err(err(n, format!("expected {} fields, got {}", 2 + ds + dc, fields.len())));
            }
            let t: usize = fields[0].parse().map_err(|e: std::num::ParseIntError| err(n, e.to_string()))?;
            if t != states.len() {
                return Err(err(n, format!("time index {t} out of order")));
            }
            segments.push(fields[1].parse().map_err(|e: std::num::ParseIntError| err(n, e.to_string()))?);
            let nums = fields[2..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| err(n, e.to_string()))?;
            states.push(nums[..ds].to_vec());
            controls.push(nums[ds..].to_vec());
        }
        let env = env.ok_or_else(|| err(0, "missing env header".into()))?;
        if length != Some(states.len()) {
            return Err(err(0, format!("header length {length:?} does not match {} records", states.len())));
        }
        Ok(Self {
            env,
            seed: seed.ok_or_else(|| err(0, "missing seed".into()))?,
            noise_var: noise_var.ok_or_else(|| err(0, "missing noise_var".into()))?,
            states,
            controls,
            segments,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<(), EnvError> {
        std::fs::write(path, self.to_text())
            .map_err(|e| EnvError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn read_file(path: &Path) -> Result<Self, EnvError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| EnvError::Io { path: p.clone(), message: e.to_string() })?;
        Self::from_text(&text, &p)
    }
}

/// Drives the environment with i.i.d. `N(0, σ_ε² I)` controls.
pub fn explore_rollout(env: &Env, opts: &ExploreOptions, seed: u64) -> Result<Trajectory, EnvError> {
    env.validate()?;
    if opts.steps == 0 || !(opts.noise_var >= 0.0) {
        return Err(EnvError::Invalid("rollout needs steps ≥ 1 and a nonnegative variance".into()));
    }
    if let Some(y0) = &opts.initial {
        if !env.admissible(y0) {
            return Err(EnvError::Invalid(format!("initial state {y0:?} is not admissible")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = opts.noise_var.sqrt();
    let mut states = Vec::with_capacity(opts.steps);
    let mut controls = Vec::with_capacity(opts.steps);
    let mut segments = Vec::with_capacity(opts.steps);
    if let Some(b) = &opts.start_box {
        if b.len() != env.state_dim() || b.iter().any(|r| !(r[0] <= r[1])) {
            return Err(EnvError::Invalid("start box must give low ≤ high for every state dimension".into()));
        }
    }
    let mut y = match &opts.initial {
        Some(y0) => y0.clone(),
        None => random_start(env, opts.start_box.as_deref(), &mut rng)?,
    };
    let mut segment = 0;
    for t in 0..opts.steps {
        if t > 0 && opts.segment_len > 0 && t % opts.segment_len == 0 {
            segment += 1;
            y = random_start(env, opts.start_box.as_deref(), &mut rng)?;
        }
        let u: Vec<f64> = (0..env.control_dim()).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        let next = env.step(&y, &u);
        states.push(std::mem::replace(&mut y, next));
        controls.push(u);
        segments.push(segment);
    }
    Ok(Trajectory { env: env.clone(), seed, noise_var: opts.noise_var, states, controls, segments })
}

/// Uniform draw from the admissible part of `bounds`, by rejection. Pendulum
/// angles are wrapped first, so a box may straddle `θ = ±π`.
pub fn random_start(env: &Env, bounds: Option<&[[f64; 2]]>, rng: &mut impl Rng) -> Result<Vec<f64>, EnvError> {
    let Some(b) = bounds else {
        return Ok(env.random_state(rng));
    };
    for _ in 0..10_000 {
        let mut y: Vec<f64> = b.iter().map(|r| if r[0] < r[1] { rng.gen_range(r[0]..r[1]) } else { r[0] }).collect();
        if let (Env::Pendulum(_), Some(th)) = (env, y.first_mut()) {
            *th = wrap_angle(*th);
        }
        if env.admissible(&y) {
            return Ok(y);
        }
    }
    Err(EnvError::Invalid(format!("no admissible state found in {b:?}")))
}

/// `Σ_q⁻¹` from its diagonal.
pub fn diag_inverse(diag: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(diag.len(), diag.iter().map(|v| 1.0 / v)))
}

/// Gaussian draw with the given standard deviation, for tests and harness noise.
pub fn gaussian(rng: &mut impl Rng, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sd * z
}
