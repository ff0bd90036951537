//! Clustering accuracy and run summaries.
//!
//! Accuracy is the fraction of samples matched under the best one-to-one
//! mapping between cluster indices and class labels. Small problems are
//! solved by enumerating permutations; larger ones with the Hungarian
//! method on the contingency table.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::training::RunHistory;

/// Largest table side solved by enumeration in [`clustering_accuracy`].
pub const EXHAUSTIVE_MAX: usize = 8;

/// Predicted cluster index and true class per sample.
#[derive(Clone, Copy, Debug)]
pub struct LabeledPrediction<'a> {
    pub predicted: &'a [usize],
    pub truth: &'a [usize],
}

impl<'a> LabeledPrediction<'a> {
    pub fn new(predicted: &'a [usize], truth: &'a [usize]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::shape(
                "LabeledPrediction",
                predicted.len(),
                truth.len(),
            ));
        }
        if predicted.is_empty() {
            return Err(Error::InvalidInput(
                "accuracy of an empty prediction".into(),
            ));
        }
        Ok(LabeledPrediction { predicted, truth })
    }

    /// Square `n × n` table of counts, `n = max(K, C)`, rows are clusters.
    pub fn contingency(&self) -> Vec<Vec<u64>> {
        let k = self.predicted.iter().max().map_or(0, |m| m + 1);
        let c = self.truth.iter().max().map_or(0, |m| m + 1);
        let n = k.max(c);
        let mut table = vec![vec![0u64; n]; n];
        for (&p, &t) in self.predicted.iter().zip(self.truth) {
            table[p][t] += 1;
        }
        table
    }
}

/// Clustering accuracy in `[0, 1]`.
///
/// With `K ≠ C` the zero-padded square table lets the mapping cover
/// `min(K, C)` pairs; unmatched clusters count as wrong.
pub fn clustering_accuracy(pred: &LabeledPrediction) -> f64 {
    let table = pred.contingency();
    let matched = if table.len() <= EXHAUSTIVE_MAX {
        max_matching_exhaustive(&table)
    } else {
        max_matching_hungarian(&table)
    };
    matched as f64 / pred.predicted.len() as f64
}

/// Convenience wrapper over slices.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(clustering_accuracy(&LabeledPrediction::new(
        predicted, truth,
    )?))
}

/// Accuracy forced through the Hungarian path.
pub fn accuracy_hungarian(pred: &LabeledPrediction) -> f64 {
    max_matching_hungarian(&pred.contingency()) as f64 / pred.predicted.len() as f64
}

/// Largest total of a permutation-selected set of entries, by enumeration.
pub fn max_matching_exhaustive(table: &[Vec<u64>]) -> u64 {
    fn go(table: &[Vec<u64>], row: usize, used: &mut [bool], acc: u64, best: &mut u64) {
        if row == table.len() {
            *best = (*best).max(acc);
            return;
        }
        for col in 0..table.len() {
            if !used[col] {
                used[col] = true;
                go(table, row + 1, used, acc + table[row][col], best);
                used[col] = false;
            }
        }
    }
    let mut best = 0;
    go(table, 0, &mut vec![false; table.len()], 0, &mut best);
    best
}

/// Largest total of a permutation-selected set of entries, by the
/// Hungarian method (shortest augmenting paths with potentials).
pub fn max_matching_hungarian(table: &[Vec<u64>]) -> u64 {
    let n = table.len();
    if n == 0 {
        return 0;
    }
    let top = table.iter().flatten().copied().max().unwrap_or(0) as i64;
    let cost = |i: usize, j: usize| top - table[i][j] as i64;

    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| table[owner[j] - 1][j - 1]).sum()
}

/// Accuracy of a fully converged K-means (seeded start) on `points`.
pub fn kmeans_accuracy(points: &Matrix, truth: &[usize], k: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fit = clustering::kmeans(points, k, 300, &mut rng)?;
    accuracy(&fit.assignments, truth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: usize,
    pub final_acc: Option<f64>,
    pub best_acc: Option<f64>,
    pub best_acc_iteration: Option<usize>,
    pub final_disc_objective: Option<f64>,
    pub final_enc_objective: Option<f64>,
    pub final_mean_d_pos: Option<f64>,
    pub final_mean_d_neg: Option<f64>,
    pub final_recon_loss: Option<f64>,
    pub final_cluster_loss: Option<f64>,
}

/// Summary of a non-empty history. Ties for best accuracy resolve to the
/// latest iteration.
pub fn summarize_run(history: &RunHistory) -> Result<RunSummary> {
    let last = history
        .records
        .last()
        .ok_or_else(|| Error::InvalidInput("cannot summarise an empty history".into()))?;
    let mut best: Option<(f64, usize)> = None;
    for r in &history.records {
        if let Some(a) = r.acc {
            if best.is_none_or(|(b, _)| a >= b) {
                best = Some((a, r.iteration));
            }
        }
    }
    Ok(RunSummary {
        iterations: history.records.len(),
        final_acc: last.acc,
        best_acc: best.map(|b| b.0),
        best_acc_iteration: best.map(|b| b.1),
        final_disc_objective: last.disc_objective,
        final_enc_objective: last.enc_objective,
        final_mean_d_pos: last.mean_d_pos,
        final_mean_d_neg: last.mean_d_neg,
        final_recon_loss: last.recon_loss,
        final_cluster_loss: last.cluster_loss,
    })
}
