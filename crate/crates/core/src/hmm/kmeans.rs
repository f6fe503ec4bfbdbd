use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GaussianHmm, HmmError};
use crate::klcore::Transition;
use crate::linalg::{apply_covariance_floor, median, CsrMatrix};

const MAX_LLOYD_ITERS: usize = 500;
const MAX_RESEEDS: usize = 20;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

/// `1e-6 ·` median squared distance of the data from its grand mean.
pub fn covariance_floor(data: &[DVector<f64>]) -> f64 {
    let n = data.len() as f64;
    let d = data[0].len();
    let mut mean = DVector::zeros(d);
    for y in data {
        mean += y;
    }
    mean /= n;
    let sq: Vec<f64> = data.iter().map(|y| (y - &mean).norm_squared()).collect();
    let m = median(&sq);
    1e-6 * if m > 0.0 { m } else { 1.0 }
}

/// Lloyd's k-means with k-means++ seeding, deterministic given `seed`.
///
/// Clusters that empty out during iteration are re-seeded at the point
/// farthest from its center, at most `MAX_RESEEDS` times.
pub fn kmeans_init(data: &[DVector<f64>], n_states: usize, seed: u64) -> Result<KmeansResult, HmmError> {
    if n_states == 0 {
        return Err(HmmError::InvalidData("n_states must be positive".into()));
    }
    if data.is_empty() {
        return Err(HmmError::InvalidData("no data".into()));
    }
    let d = data[0].len();
    if data.iter().any(|y| y.len() != d || y.iter().any(|v| !v.is_finite())) {
        return Err(HmmError::InvalidData("inconsistent or non-finite data".into()));
    }
    let distinct: HashSet<Vec<u64>> = data.iter().map(|y| y.iter().map(|v| v.to_bits()).collect()).collect();
    if distinct.len() < n_states {
        return Err(HmmError::EmptyCluster { retries: 0, distinct: distinct.len(), requested: n_states });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeanspp(data, n_states, &mut rng);
    let mut assignments = vec![usize::MAX; data.len()];
    let mut reseeds = 0;
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        for (i, y) in data.iter().enumerate() {
            let k = nearest(&centers, y).0;
            if assignments[i] != k {
                assignments[i] = k;
                changed = true;
            }
        }
        let mut sums = vec![DVector::<f64>::zeros(d); n_states];
        let mut counts = vec![0usize; n_states];
        for (y, &k) in data.iter().zip(&assignments) {
            sums[k] += y;
            counts[k] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            reseeds += 1;
            if reseeds > MAX_RESEEDS {
                return Err(HmmError::EmptyCluster { retries: MAX_RESEEDS, distinct: distinct.len(), requested: n_states });
            }
            let far = (0..data.len())
                .max_by(|&a, &b| {
                    let da = (&data[a] - &centers[assignments[a]]).norm_squared();
                    let db = (&data[b] - &centers[assignments[b]]).norm_squared();
                    da.total_cmp(&db)
                })
                .expect("non-empty data");
            centers[empty] = data[far].clone();
            assignments.iter_mut().for_each(|a| *a = usize::MAX);
            continue;
        }
        for k in 0..n_states {
            centers[k] = &sums[k] / counts[k] as f64;
        }
        if !changed || iterations >= MAX_LLOYD_ITERS {
            break;
        }
    }

    let floor = covariance_floor(data);
    let mut covs = vec![DMatrix::<f64>::zeros(d, d); n_states];
    let mut counts = vec![0usize; n_states];
    let mut pooled = DMatrix::<f64>::zeros(d, d);
    for (y, &k) in data.iter().zip(&assignments) {
        let diff = y - &centers[k];
        let outer = &diff * diff.transpose();
        covs[k] += &outer;
        pooled += &outer;
        counts[k] += 1;
    }
    pooled /= data.len() as f64;
    for k in 0..n_states {
        if counts[k] > d {
            covs[k] /= counts[k] as f64;
        } else {
            covs[k] = pooled.clone();
        }
        apply_covariance_floor(&mut covs[k], floor);
    }
    Ok(KmeansResult { means: centers, covariances: covs, assignments, iterations })
}

fn nearest(centers: &[DVector<f64>], y: &DVector<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d2 = (y - c).norm_squared();
        if d2 < best.1 {
            best = (k, d2);
        }
    }
    best
}

fn kmeanspp(data: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut centers = vec![data[rng.gen_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|y| (y - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = data.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.gen_range(0..data.len())
        };
        let c = data[pick].clone();
        for (dist, y) in d2.iter_mut().zip(data) {
            *dist = dist.min((y - &c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

/// Options for building an initial HMM from k-means.
#[derive(Debug, Clone, Copy)]
pub struct InitOptions {
    /// Each state may also move to this many nearest clusters (in
    /// per-dimension standardized units), in both directions.
    pub neighbors: usize,
    /// Pseudo-count added to every allowed transition.
    pub smoothing: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self { neighbors: 8, smoothing: 0.1 }
    }
}

/// Initial HMM: k-means emissions, transitions from hard-assignment counts.
///
/// The transition support is the observed hard-assignment transitions, the
/// self loops, and a symmetric nearest-cluster neighbourhood. Entries outside
/// the support start (and under EM stay) at exactly zero.
pub fn init_from_kmeans(
    sequences: &[Vec<DVector<f64>>],
    n_states: usize,
    seed: u64,
    opts: InitOptions,
) -> Result<GaussianHmm, HmmError> {
    let data: Vec<DVector<f64>> = sequences.iter().flatten().cloned().collect();
    let km = kmeans_init(&data, n_states, seed)?;
    let d = data[0].len();
    let mut scale = DVector::<f64>::zeros(d);
    let mut mean = DVector::<f64>::zeros(d);
    for y in &data {
        mean += y;
    }
    mean /= data.len() as f64;
    for y in &data {
        scale += (y - &mean).map(|v| v * v);
    }
    scale = scale.map(|v| (v / data.len() as f64).sqrt().max(1e-12));

    let mut counts = vec![std::collections::BTreeMap::<usize, f64>::new(); n_states];
    for k in 0..n_states {
        counts[k].insert(k, 0.0);
    }
    let std_centers: Vec<DVector<f64>> = km.means.iter().map(|c| c.component_div(&scale)).collect();
    for k in 0..n_states {
        let mut order: Vec<(usize, f64)> = (0..n_states)
            .filter(|&j| j != k)
            .map(|j| (j, (&std_centers[j] - &std_centers[k]).norm_squared()))
            .collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for &(j, _) in order.iter().take(opts.neighbors) {
            counts[k].entry(j).or_insert(0.0);
            counts[j].entry(k).or_insert(0.0);
        }
    }
    let mut offset = 0;
    for seq in sequences {
        let labels = &km.assignments[offset..offset + seq.len()];
        for w in labels.windows(2) {
            *counts[w[0]].entry(w[1]).or_insert(0.0) += 1.0;
        }
        offset += seq.len();
    }
    let rows: Vec<Vec<(usize, f64)>> = counts
        .into_iter()
        .map(|row| {
            let total: f64 = row.values().map(|c| c + opts.smoothing).sum();
            row.into_iter().map(|(j, c)| (j, (c + opts.smoothing) / total)).collect()
        })
        .collect();
    let transition = Transition::sparse(CsrMatrix::from_rows(n_states, rows));
    GaussianHmm::new(transition, km.means, km.covariances, vec![1.0 / n_states as f64; n_states])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn clouds(n: usize, seed: u64) -> (Vec<DVector<f64>>, [f64; 2]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        let mut sums = [0.0, 0.0];
        for i in 0..2 * n {
            let c = if i % 2 == 0 { -10.0 } else { 10.0 };
            let v = c + noise.sample(&mut rng);
            sums[i % 2] += v;
            data.push(DVector::from_element(1, v));
        }
        (data, [sums[0] / n as f64, sums[1] / n as f64])
    }

    #[test]
    fn separated_clouds_recover_sample_means() {
        let (data, oracle) = clouds(500, 3);
        let r = kmeans_init(&data, 2, 11).unwrap();
        let mut got: Vec<f64> = r.means.iter().map(|m| m[0]).collect();
        got.sort_by(|a, b| a.total_cmp(b));
        assert!((got[0] - oracle[0]).abs() < 0.1, "{got:?} vs {oracle:?}");
        assert!((got[1] - oracle[1]).abs() < 0.1);
        assert!((got[0] + 10.0).abs() < 0.2 && (got[1] - 10.0).abs() < 0.2);
    }

    #[test]
    fn one_cluster_is_the_sample_moments() {
        let data: Vec<DVector<f64>> =
            [1.0, 2.0, 4.0, 7.0].iter().map(|&v| DVector::from_vec(vec![v, v * v])).collect();
        let r = kmeans_init(&data, 1, 0).unwrap();
        assert!((r.means[0][0] - 3.5).abs() < 1e-12);
        assert!((r.means[0][1] - 17.5).abs() < 1e-12);
        // population moments of x = [1,2,4,7] and x²
        assert!((r.covariances[0][(0, 0)] - 5.25).abs() < 1e-12);
        assert!((r.covariances[0][(0, 1)] - 42.75).abs() < 1e-12);
        assert!((r.covariances[0][(1, 1)] - 362.25).abs() < 1e-12);
    }

    #[test]
    fn too_few_distinct_points() {
        let data = vec![DVector::from_element(1, 1.0); 10]
            .into_iter()
            .chain(std::iter::once(DVector::from_element(1, 2.0)))
            .collect::<Vec<_>>();
        assert!(matches!(kmeans_init(&data, 3, 0), Err(HmmError::EmptyCluster { distinct: 2, .. })));
    }

    #[test]
    fn deterministic_given_seed() {
        let (data, _) = clouds(200, 5);
        let a = kmeans_init(&data, 5, 42).unwrap();
        let b = kmeans_init(&data, 5, 42).unwrap();
        assert_eq!(a.means, b.means);
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn initial_model_is_valid_and_sparse() {
        let (data, _) = clouds(300, 9);
        let seqs = vec![data];
        let m = init_from_kmeans(&seqs, 6, 1, InitOptions { neighbors: 1, smoothing: 0.1 }).unwrap();
        assert_eq!(m.n_states(), 6);
        let nnz = m.transition().to_sparse().nnz();
        assert!(nnz < 36);
    }
}
