//! Experiment pipeline: exploration rollouts, model training, latent
//! solving, closed-loop evaluation and the reaching scaling sweep.

pub mod config;
mod pipeline;
pub mod report;
mod scaling;
pub mod vi;

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{ExperimentConfig, ModelConfig, SolverKind};
pub use pipeline::{collect, quadratic_cost, reaching_cost, run, snapped_target, solve, train, Policy, Solved, Trained, TrainedModel};
pub use report::{EpisodeReport, RunReport, Summary};
pub use scaling::{eval_scaling, feasible, reaching_config, scaling_csv, ScalingRow, ScalingStatus};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl HarnessError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Io { path: path.display().to_string(), message: e.to_string() }
    }

    /// Process exit code: 2 config, 3 infeasible, 4 numerical, 1 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Infeasible(_) => 3,
            HarnessError::Numerical(_) => 4,
            HarnessError::Io { .. } => 1,
        }
    }
}

/// Seed of sub-stream `stream`: the first word of ChaCha8 keyed by `root`
/// on that stream. Trial `i` uses stream `i + 1`; stream 0 is reserved.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng.next_u64()
}

pub fn trial_seed(root: u64, trial: usize) -> u64 {
    derive_seed(root, trial as u64 + 1)
}

/// Maps `f` over `0..n` on scoped worker threads, results in index order.
pub fn par_map<T: Send, F: Fn(usize) -> T + Sync>(n: usize, f: F) -> Vec<T> {
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunks: Vec<_> = out.chunks_mut(n.div_ceil(workers)).enumerate().collect();
        let chunk_len = n.div_ceil(workers);
        for (c, chunk) in chunks {
            let f = &f;
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(c * chunk_len + k));
                }
            });
        }
    });
    out.into_iter().map(|v| v.expect("every index is filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        let seeds: std::collections::HashSet<u64> = (0..100).map(|i| trial_seed(7, i)).collect();
        assert_eq!(seeds.len(), 100);
        assert_ne!(trial_seed(7, 0), trial_seed(8, 0));
    }

    #[test]
    fn par_map_keeps_order() {
        assert_eq!(par_map(37, |i| i * i), (0..37).map(|i| i * i).collect::<Vec<_>>());
        assert!(par_map(0, |i| i).is_empty());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 2);
        assert_eq!(HarnessError::Infeasible("x".into()).exit_code(), 3);
        assert_eq!(HarnessError::Numerical("x".into()).exit_code(), 4);
    }
}
