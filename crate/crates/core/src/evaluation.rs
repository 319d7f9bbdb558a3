//! Clustering metrics: Kuhn-Munkres matched accuracy, the reject option,
//! mode coverage, and a k-means baseline.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::Dataset;
use crate::distributions::kl_categorical;
use crate::error::{Error, Result};
use crate::networks::hard_assignments;
use crate::tensor::Tensor;

/// Maximum-weight one-to-one assignment of rows to columns of a count
/// matrix. Returns, for each row, the column it is matched to (`None` for
/// surplus rows of a tall matrix).
pub fn hungarian_map(counts: &[Vec<u64>]) -> Vec<Option<usize>> {
    let rows = counts.len();
    let cols = counts.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let max = counts.iter().flatten().copied().max().unwrap_or(0) as i64;
    // Square cost matrix, 1-indexed; padding cells cost `max` (count 0).
    let cost = |i: usize, j: usize| -> i64 {
        let c = counts.get(i - 1).and_then(|r| r.get(j - 1)).copied().unwrap_or(0) as i64;
        max - c
    };

    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1]; // owner[j] = row matched to column j
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
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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

    let mut mapping = vec![None; rows];
    for j in 1..=n {
        let i = owner[j];
        if i >= 1 && i <= rows && j <= cols {
            mapping[i - 1] = Some(j - 1);
        }
    }
    mapping
}

/// Total count picked up by `mapping`.
pub fn matched_total(counts: &[Vec<u64>], mapping: &[Option<usize>]) -> u64 {
    mapping
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| counts[i][j]))
        .sum()
}

/// `confusion[pred][true]` counts.
pub fn confusion_matrix(true_labels: &[usize], cluster_labels: &[usize], k_pred: usize, k_true: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; k_true]; k_pred];
    for (&t, &c) in true_labels.iter().zip(cluster_labels) {
        m[c][t] += 1;
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub acc: f64,
    pub mapping: Vec<Option<usize>>,
    pub confusion: Vec<Vec<u64>>,
}

/// Unsupervised clustering accuracy: the fraction of samples whose cluster
/// maps to their class under the best one-to-one cluster→class mapping.
pub fn clustering_accuracy(true_labels: &[usize], cluster_labels: &[usize]) -> Result<Accuracy> {
    if true_labels.len() != cluster_labels.len() {
        return Err(Error::shape(format!(
            "{} labels vs {} cluster assignments",
            true_labels.len(),
            cluster_labels.len()
        )));
    }
    if true_labels.is_empty() {
        return Err(Error::Invalid("accuracy of an empty sample".into()));
    }
    let k_true = true_labels.iter().max().map_or(0, |m| m + 1);
    let k_pred = cluster_labels.iter().max().map_or(0, |m| m + 1);
    let confusion = confusion_matrix(true_labels, cluster_labels, k_pred, k_true);
    let mapping = hungarian_map(&confusion);
    let acc = matched_total(&confusion, &mapping) as f64 / true_labels.len() as f64;
    Ok(Accuracy { acc, mapping, confusion })
}

/// Accuracy of `cluster_labels` against a dataset's ground truth, when it
/// has any.
pub fn dataset_accuracy(dataset: &Dataset, cluster_labels: &[usize]) -> Result<Option<Accuracy>> {
    match dataset.labels() {
        Some(labels) => clustering_accuracy(labels, cluster_labels).map(Some),
        None => Ok(None),
    }
}

/// Number of distinct clusters used and `KL(empirical ‖ uniform)`.
pub fn mode_coverage(cluster_labels: &[usize], k: usize) -> Result<(usize, f64)> {
    if k == 0 {
        return Err(Error::config("mode_coverage needs k >= 1"));
    }
    if cluster_labels.is_empty() {
        return Err(Error::Invalid("mode_coverage of an empty sample".into()));
    }
    let mut counts = vec![0usize; k];
    for &c in cluster_labels {
        if c >= k {
            return Err(Error::Invalid(format!("cluster label {c} outside [0, {k})")));
        }
        counts[c] += 1;
    }
    let n = cluster_labels.len() as f64;
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let covered = counts.iter().filter(|&&c| c > 0).count();
    let kl = kl_categorical(&freq, &vec![1.0 / k as f64; k])?;
    Ok((covered, kl))
}

/// Evaluation of cluster posteriors at one rejection threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReport {
    pub gamma: f64,
    pub n: usize,
    /// Accuracy over all samples, when labels are known.
    pub acc: Option<f64>,
    pub confusion: Option<Vec<Vec<u64>>>,
    pub mapping: Option<Vec<Option<usize>>>,
    pub rejected: usize,
    pub rejection_rate: f64,
    /// Accuracy over the accepted samples, with the mapping refit on them.
    pub acc_accepted: Option<f64>,
    pub modes_covered: usize,
    pub kl_marginal: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"))
}

impl fmt::Display for ClusterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gamma={:.4} n={} rejected={} rejection_rate={:.6} acc={} acc_accepted={} modes={} kl={:.6}",
            self.gamma,
            self.n,
            self.rejected,
            self.rejection_rate,
            fmt_opt(self.acc),
            fmt_opt(self.acc_accepted),
            self.modes_covered,
            self.kl_marginal
        )
    }
}

/// Rejects samples whose largest posterior is `<= gamma` and scores the
/// rest.
pub fn reject_evaluate(y_probs: &Tensor, true_labels: Option<&[usize]>, gamma: f64) -> Result<ClusterReport> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("gamma {gamma} outside [0, 1]")));
    }
    let (n, k) = y_probs.dims2()?;
    if let Some(labels) = true_labels {
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} samples", labels.len())));
        }
    }
    let clusters = hard_assignments(y_probs);
    let accepted: Vec<usize> = (0..n)
        .filter(|&i| y_probs.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max) > gamma)
        .collect();
    let rejected = n - accepted.len();
    let (modes_covered, kl_marginal) = mode_coverage(&clusters, k)?;

    let mut report = ClusterReport {
        gamma,
        n,
        acc: None,
        confusion: None,
        mapping: None,
        rejected,
        rejection_rate: rejected as f64 / n as f64,
        acc_accepted: None,
        modes_covered,
        kl_marginal,
    };
    if let Some(labels) = true_labels {
        let all = clustering_accuracy(labels, &clusters)?;
        report.acc = Some(all.acc);
        report.confusion = Some(all.confusion);
        report.mapping = Some(all.mapping);
        if !accepted.is_empty() {
            let t: Vec<usize> = accepted.iter().map(|&i| labels[i]).collect();
            let c: Vec<usize> = accepted.iter().map(|&i| clusters[i]).collect();
            report.acc_accepted = Some(clustering_accuracy(&t, &c)?.acc);
        }
    }
    Ok(report)
}

/// [`reject_evaluate`] against a dataset's own labels (if any).
pub fn evaluate_dataset(dataset: &Dataset, y_probs: &Tensor, gamma: f64) -> Result<ClusterReport> {
    reject_evaluate(y_probs, dataset.labels(), gamma)
}

/// Outcome of [`kmeans_baseline`].
#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub sse_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding and at most `iters` rounds.
pub fn kmeans_baseline(data: &Tensor, k: usize, seed: u64, iters: usize) -> Result<KMeansResult> {
    let (n, _) = data.dims2()?;
    if k == 0 {
        return Err(Error::config("k-means needs k >= 1"));
    }
    if n < k {
        return Err(Error::Invalid(format!("k-means with k = {k} on {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = vec![data.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(data.row(next).to_vec());
        let c = centroids.last().expect("just pushed");
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), c));
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut sse_history = Vec::new();
    for _ in 0..iters.max(1) {
        let mut changed = false;
        let mut sse = 0.0;
        let mut dist_to_own = vec![0.0; n];
        for i in 0..n {
            let row = data.row(i);
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(j, c)| (j, sq_dist(row, c)))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
            dist_to_own[i] = d;
            sse += d;
        }
        sse_history.push(sse);
        if !changed {
            break;
        }

        let dim = data.cols();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // empty cluster: restart it at the worst-served point
                let far = (0..n)
                    .max_by(|&a, &b| dist_to_own[a].total_cmp(&dist_to_own[b]))
                    .expect("n >= k >= 1");
                centroids[j] = data.row(far).to_vec();
                dist_to_own[far] = 0.0;
            }
        }
    }
    Ok(KMeansResult { labels, centroids, sse_history })
}
