//! Latent-space partitioning: single Lloyd steps, hard diagonal-Gaussian
//! mixtures, and sampling from an assigned component.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Matrix};
use crate::par::{self, Exec};

/// Per-dimension variance floor applied before inverting to a precision.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Which partitioning drives the cluster parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterMode {
    /// Lloyd step on Euclidean distance; precisions estimated afterwards.
    #[default]
    #[serde(rename = "kmeans")]
    Kmeans,
    /// Hard-assignment EM on diagonal Gaussians with mixing weights.
    #[serde(rename = "gmm-hard")]
    GmmHard,
}

impl fmt::Display for ClusterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterMode::Kmeans => "kmeans",
            ClusterMode::GmmHard => "gmm-hard",
        })
    }
}

impl FromStr for ClusterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(ClusterMode::Kmeans),
            "gmm-hard" => Ok(ClusterMode::GmmHard),
            other => Err(Error::InvalidInput(format!(
                "unknown clustering mode {other:?}"
            ))),
        }
    }
}

/// Result of one Lloyd iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansStep {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    /// Clusters that came up empty and were re-seeded.
    pub repaired: Vec<usize>,
}

/// Index of the nearest row of `centers`; ties go to the lowest index.
pub fn nearest_center(point: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter_rows().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn check_points(points: &Matrix, k: usize, dim: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::InvalidInput("cluster count must be positive".into()));
    }
    if points.rows() < k {
        return Err(Error::InvalidInput(format!(
            "{} points cannot fill {k} clusters",
            points.rows()
        )));
    }
    if points.cols() != dim {
        return Err(Error::shape("cluster dimension", dim, points.cols()));
    }
    Ok(())
}

/// Moves one point into every empty cluster. The donor is the point with
/// the largest `cost` among clusters that keep at least one other member.
fn repair_empty(assignments: &mut [usize], costs: &mut [f64], k: usize) -> Vec<usize> {
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    let mut repaired = Vec::new();
    for target in 0..k {
        if counts[target] > 0 {
            continue;
        }
        let donor = (0..assignments.len())
            .filter(|&n| counts[assignments[n]] > 1)
            .fold(None, |best: Option<usize>, n| match best {
                Some(b) if costs[b] >= costs[n] => Some(b),
                _ => Some(n),
            })
            .expect("at least as many points as clusters");
        counts[assignments[donor]] -= 1;
        counts[target] += 1;
        assignments[donor] = target;
        costs[donor] = 0.0;
        repaired.push(target);
    }
    repaired
}

/// Exactly one Lloyd iteration: nearest-centre assignment followed by
/// re-centring. Empty clusters are re-seeded at the point farthest from its
/// own centre.
pub fn kmeans_step(points: &Matrix, centers: &Matrix) -> Result<KMeansStep> {
    kmeans_step_with(Exec::default(), points, centers)
}

pub fn kmeans_step_with(exec: Exec, points: &Matrix, centers: &Matrix) -> Result<KMeansStep> {
    let k = centers.rows();
    check_points(points, k, centers.cols())?;
    let exec = exec.for_work(points.rows() * k * points.cols());
    let nearest = par::map_indices(exec, points.rows(), |n| {
        nearest_center(points.row(n), centers)
    });
    let (mut assignments, mut costs): (Vec<usize>, Vec<f64>) = nearest.into_iter().unzip();
    let repaired = repair_empty(&mut assignments, &mut costs, k);
    let new_centers = cluster_means(points, &assignments, k);
    Ok(KMeansStep {
        centers: new_centers,
        assignments,
        repaired,
    })
}

fn cluster_means(points: &Matrix, assignments: &[usize], k: usize) -> Matrix {
    let dim = points.cols();
    let mut sums = Matrix::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (row, &a) in points.iter_rows().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        let n = count.max(1) as f64;
        sums.row_mut(c).iter_mut().for_each(|s| *s /= n);
    }
    sums
}

/// Within-cluster sum of squared distances.
pub fn within_cluster_ss(points: &Matrix, centers: &Matrix, assignments: &[usize]) -> f64 {
    points
        .iter_rows()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, centers.row(a)))
        .sum()
}

/// `k` distinct rows of `points`, chosen uniformly without replacement.
pub fn init_centers<R: Rng + ?Sized>(points: &Matrix, k: usize, rng: &mut R) -> Result<Matrix> {
    check_points(points, k, points.cols())?;
    let picks = index::sample(rng, points.rows(), k).into_vec();
    Ok(points.select_rows(&picks))
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

/// Lloyd iterations from a seeded start until assignments stop changing
/// or `max_iter` is reached.
pub fn kmeans<R: Rng + ?Sized>(
    points: &Matrix,
    k: usize,
    max_iter: usize,
    rng: &mut R,
) -> Result<KMeansFit> {
    let mut centers = init_centers(points, k, rng)?;
    let mut assignments: Vec<usize> = Vec::new();
    for it in 1..=max_iter.max(1) {
        let step = kmeans_step(points, &centers)?;
        let done = step.assignments == assignments && step.repaired.is_empty();
        centers = step.centers;
        assignments = step.assignments;
        if done {
            return Ok(KMeansFit {
                centers,
                assignments,
                iterations: it,
            });
        }
    }
    Ok(KMeansFit {
        centers,
        assignments,
        iterations: max_iter.max(1),
    })
}

/// Non-fatal conditions recorded during estimation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterWarning {
    /// Fewer than two members; the variance floor stands in for the
    /// sample variance.
    TooFewPoints { cluster: usize, count: usize },
}

/// Means, diagonal precisions, mixing weights and hard assignments of a
/// buffered set of latent points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub mode: ClusterMode,
    /// `K × Z`
    pub means: Vec<Vec<f64>>,
    /// `K × Z`, every entry at most `1 / VARIANCE_FLOOR`.
    pub precisions: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub assignments: Vec<usize>,
    #[serde(default)]
    pub warnings: Vec<ClusterWarning>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Mean matrix, `K × Z`.
    pub fn means_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.means).expect("model means are rectangular")
    }

    /// One-of-K indicator for buffered point `n`.
    pub fn indicator(&self, n: usize) -> Vec<u8> {
        let mut v = vec![0; self.k()];
        v[self.assignments[n]] = 1;
        v
    }

    /// Diagonal-Gaussian log density of `z` under component `k`.
    pub fn log_density(&self, z: &[f64], k: usize) -> f64 {
        self.means[k]
            .iter()
            .zip(&self.precisions[k])
            .zip(z)
            .map(|((m, t), x)| 0.5 * (t.ln() - LN_2PI) - 0.5 * t * (x - m) * (x - m))
            .sum()
    }
}

/// Estimates per-cluster means, floored diagonal precisions and mixing
/// weights from hard assignments.
pub fn estimate_cluster_params(
    points: &Matrix,
    assignments: &[usize],
    k: usize,
    mode: ClusterMode,
) -> Result<ClusterModel> {
    if assignments.len() != points.rows() {
        return Err(Error::shape(
            "estimate_cluster_params",
            points.rows(),
            assignments.len(),
        ));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
        return Err(Error::InvalidInput(format!(
            "assignment {bad} out of range for {k} clusters"
        )));
    }
    let dim = points.cols();
    let means = cluster_means(points, assignments, k);
    let mut counts = vec![0usize; k];
    let mut sq = vec![vec![0.0; dim]; k];
    for (row, &a) in points.iter_rows().zip(assignments) {
        counts[a] += 1;
        for ((s, v), m) in sq[a].iter_mut().zip(row).zip(means.row(a)) {
            *s += (v - m) * (v - m);
        }
    }
    let mut warnings = Vec::new();
    let mut precisions = Vec::with_capacity(k);
    for c in 0..k {
        match counts[c] {
            0 => return Err(Error::EmptyCluster { cluster: c }),
            1 => {
                warnings.push(ClusterWarning::TooFewPoints {
                    cluster: c,
                    count: 1,
                });
                precisions.push(vec![1.0 / VARIANCE_FLOOR; dim]);
            }
            n => precisions.push(
                sq[c]
                    .iter()
                    .map(|s| 1.0 / (s / (n - 1) as f64).max(VARIANCE_FLOOR))
                    .collect(),
            ),
        }
    }
    let m = points.rows() as f64;
    Ok(ClusterModel {
        mode,
        means: means.iter_rows().map(<[f64]>::to_vec).collect(),
        precisions,
        weights: counts.iter().map(|&c| c as f64 / m).collect(),
        assignments: assignments.to_vec(),
        warnings,
    })
}

/// Component maximising the diagonal-Gaussian log density of `z` (plus the
/// log mixing weight in [`ClusterMode::GmmHard`]). Ties go to the lowest index.
pub fn assign_max_likelihood(z: &[f64], model: &ClusterModel) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for k in 0..model.k() {
        let mut score = model.log_density(z, k);
        if model.mode == ClusterMode::GmmHard {
            score += model.weights[k].ln();
        }
        if score > best.1 {
            best = (k, score);
        }
    }
    best.0
}

/// Maximum-likelihood assignment of every row.
pub fn assign_all(points: &Matrix, model: &ClusterModel) -> Vec<usize> {
    let exec = Exec::default().for_work(points.rows() * model.k() * points.cols());
    par::map_indices(exec, points.rows(), |n| {
        assign_max_likelihood(points.row(n), model)
    })
}

/// One hard-EM iteration warm-started from `prev`: maximum-likelihood
/// reassignment, empty-cluster repair, re-estimation.
pub fn hard_em_step(points: &Matrix, prev: &ClusterModel) -> Result<ClusterModel> {
    let k = prev.k();
    check_points(points, k, prev.dim())?;
    let mut assignments = assign_all(points, prev);
    let mut costs: Vec<f64> = points
        .iter_rows()
        .zip(&assignments)
        .map(|(z, &a)| -prev.log_density(z, a))
        .collect();
    repair_empty(&mut assignments, &mut costs, k);
    estimate_cluster_params(points, &assignments, k, ClusterMode::GmmHard)
}

/// `count` independent draws from component `k`, one per row.
pub fn sample_assigned<R: Rng + ?Sized>(
    model: &ClusterModel,
    k: usize,
    count: usize,
    rng: &mut R,
) -> Result<Matrix> {
    if k >= model.k() {
        return Err(Error::InvalidInput(format!(
            "cluster {k} out of range for {} clusters",
            model.k()
        )));
    }
    let dim = model.dim();
    let scale: Vec<f64> = model.precisions[k]
        .iter()
        .map(|t| t.sqrt().recip())
        .collect();
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        for (m, s) in model.means[k].iter().zip(&scale) {
            let e: f64 = rng.sample(StandardNormal);
            data.push(m + s * e);
        }
    }
    Matrix::from_vec(count, dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blobs(centers: &[[f64; 2]], per: usize, sigma: f64, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (k, c) in centers.iter().enumerate() {
            for _ in 0..per {
                let e0: f64 = rng.sample(StandardNormal);
                let e1: f64 = rng.sample(StandardNormal);
                rows.push(vec![c[0] + sigma * e0, c[1] + sigma * e1]);
                labels.push(k);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn centers_on_points_are_a_fixed_point() {
        let pts = Matrix::from_rows(&[[0.0, 0.0], [3.0, 1.0], [-2.0, 5.0]]).unwrap();
        let step = kmeans_step(&pts, &pts).unwrap();
        assert_eq!(step.centers, pts);
        assert_eq!(step.assignments, vec![0, 1, 2]);
    }

    #[test]
    fn singleton_clusters_move_to_their_points() {
        let pts = Matrix::from_rows(&[[0.0], [10.0]]).unwrap();
        let init = Matrix::from_rows(&[[1.0], [9.0]]).unwrap();
        let step = kmeans_step(&pts, &init).unwrap();
        assert_eq!(step.centers.data(), &[0.0, 10.0]);
    }

    #[test]
    fn separated_blobs_recover_sample_means() {
        let (pts, labels) = blobs(&[[0.0, 0.0], [5.0, 5.0]], 100, 0.1, 7);
        let init = Matrix::from_rows(&[[1.0, 1.0], [4.0, 4.0]]).unwrap();
        let step = kmeans_step(&pts, &init).unwrap();
        for k in 0..2 {
            let members: Vec<usize> = (0..200).filter(|&n| labels[n] == k).collect();
            let oracle = pts.select_rows(&members).column_means();
            for (a, b) in step.centers.row(k).iter().zip(&oracle) {
                assert!((a - b).abs() < 0.1);
            }
        }
    }

    #[test]
    fn empty_cluster_is_reseeded_at_farthest_point() {
        let pts = Matrix::from_rows(&[[0.0], [1.0], [10.0]]).unwrap();
        let init = Matrix::from_rows(&[[0.5], [100.0]]).unwrap();
        let step = kmeans_step(&pts, &init).unwrap();
        assert_eq!(step.repaired, vec![1]);
        assert_eq!(step.assignments, vec![0, 0, 1]);
        assert_eq!(step.centers.data(), &[0.5, 10.0]);
    }

    #[test]
    fn too_few_points_rejected() {
        let pts = Matrix::from_rows(&[[0.0]]).unwrap();
        let init = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(kmeans_step(&pts, &init).is_err());
    }

    #[test]
    fn identical_points_hit_the_variance_floor() {
        let pts = Matrix::from_rows(&[[2.0, 2.0], [2.0, 2.0], [2.0, 2.0]]).unwrap();
        let m = estimate_cluster_params(&pts, &[0, 0, 0], 1, ClusterMode::Kmeans).unwrap();
        assert_eq!(m.precisions[0], vec![1.0 / VARIANCE_FLOOR; 2]);
        assert_eq!(m.weights, vec![1.0]);
    }

    #[test]
    fn unbiased_variance_of_two_points() {
        let pts = Matrix::from_rows(&[[-1.0], [1.0]]).unwrap();
        let m = estimate_cluster_params(&pts, &[0, 0], 1, ClusterMode::Kmeans).unwrap();
        assert_eq!(m.means[0], vec![0.0]);
        assert_eq!(m.precisions[0], vec![0.5]);
    }

    #[test]
    fn singleton_and_empty_clusters() {
        let pts = Matrix::from_rows(&[[0.0], [1.0], [5.0]]).unwrap();
        let m = estimate_cluster_params(&pts, &[0, 0, 1], 2, ClusterMode::Kmeans).unwrap();
        assert_eq!(
            m.warnings,
            vec![ClusterWarning::TooFewPoints {
                cluster: 1,
                count: 1
            }]
        );
        assert!(matches!(
            estimate_cluster_params(&pts, &[0, 0, 0], 2, ClusterMode::Kmeans),
            Err(Error::EmptyCluster { cluster: 1 })
        ));
    }

    // Independent estimator: two-pass over explicit member lists.
    #[test]
    fn estimator_matches_member_list_oracle() {
        let (pts, labels) = blobs(&[[0.0, 0.0], [4.0, -1.0], [-3.0, 6.0]], 50, 0.7, 11);
        let m = estimate_cluster_params(&pts, &labels, 3, ClusterMode::GmmHard).unwrap();
        for k in 0..3 {
            let members: Vec<&[f64]> = pts
                .iter_rows()
                .zip(&labels)
                .filter(|(_, &l)| l == k)
                .map(|(r, _)| r)
                .collect();
            let n = members.len() as f64;
            for d in 0..2 {
                let mean = members.iter().map(|r| r[d]).sum::<f64>() / n;
                let var = members.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                assert!((m.means[k][d] - mean).abs() < 1e-12);
                assert!((m.precisions[k][d] - 1.0 / var).abs() < 1e-9);
            }
            assert!((m.weights[k] - n / 150.0).abs() < 1e-15);
        }
        assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn model(means: Vec<Vec<f64>>, mode: ClusterMode) -> ClusterModel {
        let k = means.len();
        let dim = means[0].len();
        ClusterModel {
            mode,
            precisions: vec![vec![1.0; dim]; k],
            weights: vec![1.0 / k as f64; k],
            assignments: (0..k).collect(),
            means,
            warnings: vec![],
        }
    }

    #[test]
    fn density_peaks_at_mean() {
        let m = model(
            vec![vec![0.0, 0.0], vec![3.0, 3.0], vec![-2.0, 7.0]],
            ClusterMode::Kmeans,
        );
        assert_eq!(assign_max_likelihood(&[-2.0, 7.0], &m), 2);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let m = model(vec![vec![-1.0], vec![1.0]], ClusterMode::GmmHard);
        assert_eq!(assign_max_likelihood(&[0.0], &m), 0);
    }

    #[test]
    fn assignment_matches_brute_force_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 5;
        let m = ClusterModel {
            mode: ClusterMode::GmmHard,
            means: (0..k)
                .map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect(),
            precisions: (0..k)
                .map(|_| (0..3).map(|_| rng.random_range(0.2..4.0)).collect())
                .collect(),
            weights: vec![0.1, 0.3, 0.2, 0.15, 0.25],
            assignments: vec![],
            warnings: vec![],
        };
        for _ in 0..500 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            // Direct product of univariate densities times the weight.
            let dens: Vec<f64> = (0..k)
                .map(|c| {
                    m.weights[c]
                        * (0..3)
                            .map(|d| {
                                let t = m.precisions[c][d];
                                (t / (2.0 * std::f64::consts::PI)).sqrt()
                                    * (-0.5 * t * (z[d] - m.means[c][d]).powi(2)).exp()
                            })
                            .product::<f64>()
                })
                .collect();
            let brute = (0..k).fold(0, |b, c| if dens[c] > dens[b] { c } else { b });
            assert_eq!(assign_max_likelihood(&z, &m), brute);
        }
    }

    #[test]
    fn kmeans_and_mixture_agree_with_uniform_weights_and_shared_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let means: Vec<Vec<f64>> = (0..4)
            .map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
            .collect();
        let a = model(means.clone(), ClusterMode::Kmeans);
        let b = model(means, ClusterMode::GmmHard);
        for _ in 0..300 {
            let z = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
            assert_eq!(assign_max_likelihood(&z, &a), assign_max_likelihood(&z, &b));
        }
    }

    #[test]
    fn near_degenerate_samples_sit_on_the_mean() {
        let mut m = model(vec![vec![1.5, -2.0]], ClusterMode::Kmeans);
        m.precisions = vec![vec![1.0 / VARIANCE_FLOOR; 2]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_assigned(&m, 0, 100, &mut rng).unwrap();
        for r in s.iter_rows() {
            assert!((r[0] - 1.5).abs() < 1e-2 && (r[1] + 2.0).abs() < 1e-2);
        }
        assert!(sample_assigned(&m, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn standard_normal_moments() {
        let m = model(vec![vec![0.0]], ClusterMode::Kmeans);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let s = sample_assigned(&m, 0, 10_000, &mut rng).unwrap();
        let mean = s.data().iter().sum::<f64>() / 10_000.0;
        let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9_999.0;
        assert!(mean.abs() < 0.05);
        assert!((var - 1.0).abs() < 0.1);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let m = model(vec![vec![0.0, 1.0]], ClusterMode::Kmeans);
        let draw = |seed| sample_assigned(&m, 0, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
    }

    #[test]
    fn separated_blobs_round_trip_through_estimation() {
        let (pts, labels) = blobs(&[[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]], 100, 1.0, 3);
        let m = estimate_cluster_params(&pts, &labels, 3, ClusterMode::Kmeans).unwrap();
        assert_eq!(assign_all(&pts, &m), labels);
    }

    #[test]
    fn hard_em_step_keeps_separated_partition() {
        let (pts, labels) = blobs(&[[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]], 60, 1.0, 4);
        let m = estimate_cluster_params(&pts, &labels, 3, ClusterMode::GmmHard).unwrap();
        let next = hard_em_step(&pts, &m).unwrap();
        assert_eq!(next.assignments, labels);
    }

    #[test]
    fn parallel_and_sequential_lloyd_agree() {
        let (pts, _) = blobs(&[[0.0, 0.0], [5.0, 5.0]], 5000, 1.0, 8);
        let init = Matrix::from_rows(&[[1.0, 1.0], [4.0, 4.0]]).unwrap();
        let a = kmeans_step_with(Exec::Sequential, &pts, &init).unwrap();
        let b = kmeans_step_with(Exec::default(), &pts, &init).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lloyd_step_never_increases_wcss(seed in any::<u64>(), k in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..60)
                .map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect())
                .collect();
            let pts = Matrix::from_rows(&rows).unwrap();
            let centers = init_centers(&pts, k, &mut rng).unwrap();
            let before: Vec<usize> = pts.iter_rows().map(|p| nearest_center(p, &centers).0).collect();
            let wcss0 = within_cluster_ss(&pts, &centers, &before);
            let step = kmeans_step(&pts, &centers).unwrap();
            let wcss1 = within_cluster_ss(&pts, &step.centers, &step.assignments);
            prop_assert!(wcss1 <= wcss0 + 1e-9);
        }

        #[test]
        fn estimated_models_are_valid(seed in any::<u64>(), k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..40)
                .map(|_| (0..2).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let pts = Matrix::from_rows(&rows).unwrap();
            let centers = init_centers(&pts, k, &mut rng).unwrap();
            let step = kmeans_step(&pts, &centers).unwrap();
            let m = estimate_cluster_params(&pts, &step.assignments, k, ClusterMode::Kmeans).unwrap();
            prop_assert!((m.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for row in &m.precisions {
                for &t in row {
                    prop_assert!(t.is_finite() && t > 0.0 && t <= 1.0 / VARIANCE_FLOOR);
                }
            }
            prop_assert!(m.weights.iter().all(|&w| w > 0.0));
        }
    }
}
