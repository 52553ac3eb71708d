//! Hard pseudo labels from K-means and DBSCAN on cosine distance.
//!
//! Features are expected to be unit-norm, so cosine distance is `1 - <a, b>`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, ZERO_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMode {
    Kmeans,
    Dbscan,
}

/// Which clusterings to produce, one per granularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupSpec {
    pub mode: ClusterMode,
    /// Empty means "derive from N" (see [`default_k_list`]).
    pub kmeans_k_list: Vec<usize>,
    pub dbscan_eps_list: Vec<f64>,
    pub dbscan_min_pts: usize,
    pub kmeans_max_iter: usize,
}

fn default_min_pts() -> usize {
    4
}

fn default_kmeans_iters() -> usize {
    100
}

impl Default for GroupSpec {
    fn default() -> Self {
        Self::kmeans(Vec::new())
    }
}

impl GroupSpec {
    pub fn kmeans(k_list: Vec<usize>) -> Self {
        Self {
            mode: ClusterMode::Kmeans,
            kmeans_k_list: k_list,
            dbscan_eps_list: Vec::new(),
            dbscan_min_pts: default_min_pts(),
            kmeans_max_iter: default_kmeans_iters(),
        }
    }

    pub fn dbscan(eps_list: Vec<f64>, min_pts: usize) -> Self {
        Self {
            mode: ClusterMode::Dbscan,
            kmeans_k_list: Vec::new(),
            dbscan_eps_list: eps_list,
            dbscan_min_pts: min_pts,
            kmeans_max_iter: default_kmeans_iters(),
        }
    }

    /// The k values used for `n` samples.
    pub fn resolved_k_list(&self, n: usize) -> Vec<usize> {
        if self.kmeans_k_list.is_empty() {
            default_k_list(n)
        } else {
            self.kmeans_k_list.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ClusterMode::Kmeans => {
                if self.kmeans_k_list.contains(&0) {
                    return Err(Error::InvalidConfig("k must be >= 1".into()));
                }
            }
            ClusterMode::Dbscan => {
                if self.dbscan_eps_list.is_empty() {
                    return Err(Error::InvalidConfig("dbscan needs at least one eps".into()));
                }
                if self.dbscan_eps_list.iter().any(|&e| !(e > 0.0)) {
                    return Err(Error::InvalidConfig("eps must be > 0".into()));
                }
                if self.dbscan_min_pts == 0 {
                    return Err(Error::InvalidConfig("min_pts must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// `{N/16, N/8, N/4, N/2}`, each at least 1, deduplicated.
pub fn default_k_list(n: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = [16, 8, 4, 2].iter().map(|d| (n / d).clamp(1, n.max(1))).collect();
    ks.dedup();
    ks
}

/// Hard assignment of every sample; `None` marks DBSCAN noise.
#[derive(Debug, Clone, PartialEq)]
pub struct HardLabeling {
    pub labels: Vec<Option<usize>>,
    pub k: usize,
    /// `k x D`, unit-norm rows.
    pub centroids: Matrix,
}

impl HardLabeling {
    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Labels as integers with noise mapped to -1.
    pub fn as_signed(&self) -> Vec<i64> {
        self.labels.iter().map(|l| l.map_or(-1, |v| v as i64)).collect()
    }
}

#[inline]
fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b)
}

fn nearest(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let s = dot(row, x);
        if s > best.1 {
            best = (c, s);
        }
    }
    (best.0, 1.0 - best.1)
}

/// Normalized per-cluster means. Clusters with no members (or a zero mean)
/// keep the row from `fallback`.
pub(crate) fn cluster_means(
    features: &Matrix,
    labels: &[Option<usize>],
    k: usize,
    fallback: Option<&Matrix>,
) -> Matrix {
    let d = features.cols();
    let mut sums = Matrix::zeros(k, d);
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = *l {
            for (s, v) in sums.row_mut(l).iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
    }
    for c in 0..k {
        let n = norm(sums.row(c));
        if n < ZERO_NORM {
            if let Some(fb) = fallback {
                sums.row_mut(c).copy_from_slice(fb.row(c));
            }
        } else {
            sums.row_mut(c).iter_mut().for_each(|v| *v /= n);
        }
    }
    sums
}

fn kmeans_pp_seed(features: &Matrix, k: usize, rng: &mut impl Rng) -> Matrix {
    let n = features.rows();
    let mut centers = Vec::with_capacity(k);
    centers.push(rng.random_range(0..n));
    let mut dist: Vec<f64> = (0..n)
        .map(|i| cosine_distance(features.row(i), features.row(centers[0])).max(0.0))
        .collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total <= 0.0 {
            // every point coincides with a center; fall back to uniform
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        centers.push(pick);
        for (i, di) in dist.iter_mut().enumerate() {
            let d = cosine_distance(features.row(i), features.row(pick)).max(0.0);
            if d < *di {
                *di = d;
            }
        }
    }
    features.select_rows(&centers)
}

/// Sum over samples of cosine distance to the assigned centroid.
pub fn kmeans_objective(features: &Matrix, labeling: &HardLabeling) -> f64 {
    labeling
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|l| cosine_distance(features.row(i), labeling.centroids.row(l))))
        .sum()
}

/// Spherical Lloyd iterations. Returns the labeling and the objective after
/// every assignment step.
pub fn kmeans_trace(features: &Matrix, k: usize, seed: u64, max_iter: usize) -> Result<(HardLabeling, Vec<f64>)> {
    let n = features.rows();
    if k == 0 || n < k {
        return Err(Error::TooFewSamples {
            needed: k.max(1),
            got: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_seed(features, k, &mut rng);
    let mut labels: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(&centroids, features.row(i));
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dists[i] = d;
        }
        repair_empty(&mut labels, &mut dists, &mut centroids, features, k);
        history.push(dists.iter().sum());
        if !changed {
            break;
        }
        let wrapped: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        centroids = cluster_means(features, &wrapped, k, Some(&centroids));
    }
    // centroids consistent with the final assignment
    let wrapped: Vec<Option<usize>> = labels.into_iter().map(Some).collect();
    let centroids = cluster_means(features, &wrapped, k, Some(&centroids));
    Ok((
        HardLabeling {
            labels: wrapped,
            k,
            centroids,
        },
        history,
    ))
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(labels: &mut [usize], dists: &mut [f64], centroids: &mut Matrix, features: &Matrix, k: usize) {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let victim = (0..labels.len())
            .filter(|&i| counts[labels[i]] > 1)
            .fold(None::<usize>, |best, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            });
        let Some(i) = victim else { break };
        counts[labels[i]] -= 1;
        counts[c] += 1;
        labels[i] = c;
        dists[i] = 0.0;
        centroids.row_mut(c).copy_from_slice(features.row(i));
    }
}

pub fn kmeans(features: &Matrix, k: usize, seed: u64, max_iter: usize) -> Result<HardLabeling> {
    kmeans_trace(features, k, seed, max_iter).map(|(l, _)| l)
}

/// DBSCAN on cosine distance.
///
/// Clusters are the connected components of core points; a border point joins
/// the cluster of its nearest core neighbour. Clusters are numbered in order of
/// their smallest member index, which makes the result independent of input
/// order up to relabeling. An all-noise result has `k == 0`.
pub fn dbscan(features: &Matrix, eps: f64, min_pts: usize) -> HardLabeling {
    let n = features.rows();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| cosine_distance(features.row(i), features.row(j)) <= eps)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut comp: Vec<Option<usize>> = vec![None; n];
    let mut k = 0;
    for start in 0..n {
        if !core[start] || comp[start].is_some() {
            continue;
        }
        comp[start] = Some(k);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for &q in &neighbours[p] {
                if core[q] && comp[q].is_none() {
                    comp[q] = Some(k);
                    stack.push(q);
                }
            }
        }
        k += 1;
    }

    let mut labels = comp.clone();
    for i in 0..n {
        if core[i] {
            continue;
        }
        labels[i] = neighbours[i]
            .iter()
            .filter(|&&j| core[j])
            .map(|&j| (cosine_distance(features.row(i), features.row(j)), j))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .and_then(|(_, j)| comp[j]);
    }

    let centroids = cluster_means(features, &labels, k, None);
    HardLabeling { labels, k, centroids }
}

/// One independent clustering per configured granularity.
pub fn make_groups(features: &Matrix, spec: &GroupSpec, seed: u64) -> Result<Vec<HardLabeling>> {
    spec.validate()?;
    match spec.mode {
        ClusterMode::Kmeans => spec
            .resolved_k_list(features.rows())
            .into_iter()
            .enumerate()
            .map(|(m, k)| kmeans(features, k, seed.wrapping_add(m as u64), spec.kmeans_max_iter))
            .collect(),
        ClusterMode::Dbscan => Ok(spec
            .dbscan_eps_list
            .iter()
            .map(|&eps| dbscan(features, eps, spec.dbscan_min_pts))
            .collect()),
    }
}

/// `sample_index,group_index,label` rows, noise as -1.
pub fn labelings_to_csv(groups: &[HardLabeling]) -> String {
    let mut s = String::from("sample_index,group_index,label\n");
    for (g, lab) in groups.iter().enumerate() {
        for (i, l) in lab.as_signed().iter().enumerate() {
            s.push_str(&format!("{i},{g},{l}\n"));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize_rows;

    /// Exhaustive check that `pred` equals `truth` under some relabeling.
    fn same_partition(pred: &[Option<usize>], truth: &[usize]) -> bool {
        let mut map = std::collections::HashMap::new();
        let mut inv = std::collections::HashMap::new();
        for (p, t) in pred.iter().zip(truth) {
            let Some(p) = p else { return false };
            if *map.entry(*p).or_insert(*t) != *t || *inv.entry(*t).or_insert(*p) != *p {
                return false;
            }
        }
        true
    }

    fn circle_blobs(centres: &[f64], per: usize, spread: f64) -> (Matrix, Vec<usize>) {
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (c, &angle) in centres.iter().enumerate() {
            for j in 0..per {
                let a = angle + spread * ((j as f64) - (per as f64 - 1.0) / 2.0);
                rows.push([a.cos(), a.sin()]);
                truth.push(c);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), truth)
    }

    #[test]
    fn kmeans_two_pairs() {
        let f = l2_normalize_rows(&Matrix::from_rows(&[[1.0, 0.01], [1.0, -0.01], [0.01, 1.0], [-0.01, 1.0]]).unwrap())
            .unwrap();
        let lab = kmeans(&f, 2, 0, 50).unwrap();
        assert!(same_partition(&lab.labels, &[0, 0, 1, 1]));
    }

    #[test]
    fn kmeans_single_cluster() {
        let f = l2_normalize_rows(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap()).unwrap();
        let lab = kmeans(&f, 1, 7, 50).unwrap();
        assert!(lab.labels.iter().all(|&l| l == Some(0)));
        let mean = crate::numerics::l2_normalize(&f.col_sums()).unwrap();
        assert!(lab
            .centroids
            .row(0)
            .iter()
            .zip(&mean)
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn kmeans_four_blobs_exact() {
        let (f, truth) = circle_blobs(&[0.0, 1.6, 3.2, 4.8], 5, 0.05);
        for seed in 0..10 {
            let lab = kmeans(&f, 4, seed, 100).unwrap();
            assert!(same_partition(&lab.labels, &truth), "seed {seed}");
        }
    }

    #[test]
    fn kmeans_too_few() {
        let f = Matrix::identity(2);
        assert_eq!(
            kmeans(&f, 3, 0, 10).unwrap_err(),
            Error::TooFewSamples { needed: 3, got: 2 }
        );
    }

    #[test]
    fn kmeans_objective_non_increasing() {
        let (f, _) = circle_blobs(&[0.0, 0.9, 2.0, 3.7, 5.0], 6, 0.2);
        for seed in 0..20 {
            let (_, hist) = kmeans_trace(&f, 5, seed, 100).unwrap();
            for w in hist.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{hist:?}");
            }
        }
    }

    #[test]
    fn kmeans_duplicate_points_no_empty_cluster() {
        let f = Matrix::from_rows(&[[1.0, 0.0]; 5]).unwrap();
        let lab = kmeans(&f, 3, 1, 20).unwrap();
        let mut seen = [false; 3];
        for l in &lab.labels {
            seen[l.unwrap()] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn dbscan_two_blobs() {
        let (f, truth) = circle_blobs(&[0.0, 2.0], 5, 0.02);
        // intra-blob neighbour distance ~2e-4, inter-blob ~1.4
        let lab = dbscan(&f, 0.01, 3);
        assert_eq!(lab.k, 2);
        assert_eq!(lab.noise_count(), 0);
        assert!(same_partition(&lab.labels, &truth));
    }

    #[test]
    fn dbscan_tiny_eps_all_noise() {
        let (f, _) = circle_blobs(&[0.0, 2.0], 5, 0.02);
        let lab = dbscan(&f, 1e-12, 2);
        assert_eq!(lab.k, 0);
        assert_eq!(lab.noise_count(), 10);
    }

    #[test]
    fn dbscan_chain_is_one_cluster() {
        // 12 points 0.1 rad apart; neighbours within eps, ends far apart
        let rows: Vec<[f64; 2]> = (0..12)
            .map(|i| [(i as f64 * 0.1).cos(), (i as f64 * 0.1).sin()])
            .collect();
        let f = Matrix::from_rows(&rows).unwrap();
        let eps = 1.0 - 0.1f64.cos() + 1e-9;
        let lab = dbscan(&f, eps, 2);

        // brute-force reachability closure over the eps graph
        let n = rows.len();
        let mut reach = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                reach[i][j] = 1.0 - dot(f.row(i), f.row(j)) <= eps;
            }
        }
        for m in 0..n {
            for i in 0..n {
                for j in 0..n {
                    reach[i][j] = reach[i][j] || (reach[i][m] && reach[m][j]);
                }
            }
        }
        assert!(reach[0][n - 1]);
        assert!(1.0 - dot(f.row(0), f.row(n - 1)) > eps);
        assert_eq!(lab.k, 1);
        assert!(lab.labels.iter().all(|&l| l == Some(0)));
    }

    #[test]
    fn make_groups_two_granularities() {
        // four blobs in two well separated pairs
        let (f, truth) = circle_blobs(&[0.0, 0.5, 3.0, 3.5], 4, 0.02);
        let groups = make_groups(&f, &GroupSpec::kmeans(vec![2, 4]), 11).unwrap();
        assert_eq!(groups.len(), 2);
        let coarse: Vec<usize> = truth.iter().map(|t| t / 2).collect();
        assert!(same_partition(&groups[0].labels, &coarse));
        assert!(same_partition(&groups[1].labels, &truth));
    }

    #[test]
    fn make_groups_singletons() {
        let (f, _) = circle_blobs(&[0.0, 2.0], 3, 0.02);
        let g = make_groups(&f, &GroupSpec::kmeans(vec![1]), 0).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g[0].labels.iter().all(|&l| l == Some(0)));
        let g = make_groups(&f, &GroupSpec::dbscan(vec![0.01], 2), 0).unwrap();
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn make_groups_deterministic() {
        let (f, _) = circle_blobs(&[0.0, 1.0, 2.0, 3.0, 4.0], 6, 0.3);
        let spec = GroupSpec::kmeans(vec![3, 5, 8]);
        assert_eq!(make_groups(&f, &spec, 5).unwrap(), make_groups(&f, &spec, 5).unwrap());
    }

    #[test]
    fn default_k_list_scales() {
        assert_eq!(default_k_list(600), vec![37, 75, 150, 300]);
        assert_eq!(default_k_list(4), vec![1, 2]);
        assert_eq!(default_k_list(1), vec![1]);
    }

    #[test]
    fn invalid_specs() {
        assert!(GroupSpec::kmeans(vec![0]).validate().is_err());
        assert!(GroupSpec::dbscan(vec![], 4).validate().is_err());
        assert!(GroupSpec::dbscan(vec![-0.1], 4).validate().is_err());
    }

    #[test]
    fn csv_export() {
        let lab = HardLabeling {
            labels: vec![Some(1), None],
            k: 2,
            centroids: Matrix::identity(2),
        };
        assert_eq!(
            labelings_to_csv(&[lab]),
            "sample_index,group_index,label\n0,0,1\n1,0,-1\n"
        );
    }
}
