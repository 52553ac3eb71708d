//! Retrieval (mAP, CMC) and clustering-agreement metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, Matrix};

/// Query and gallery sides of a retrieval evaluation.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalSet<'a> {
    pub features: &'a Matrix,
    pub ids: &'a [usize],
    pub cameras: &'a [usize],
}

/// Per-query relevance flags in ranked order, after removing gallery
/// entries that share both identity and camera with the query. Queries with
/// no remaining match are dropped.
fn ranked_matches(query: RetrievalSet, gallery: RetrievalSet) -> Result<Vec<Vec<bool>>> {
    if query.features.rows() != query.ids.len() || query.ids.len() != query.cameras.len() {
        return Err(Error::LengthMismatch(query.features.rows(), query.ids.len()));
    }
    if gallery.features.rows() != gallery.ids.len() || gallery.ids.len() != gallery.cameras.len() {
        return Err(Error::LengthMismatch(gallery.features.rows(), gallery.ids.len()));
    }
    let sims = matmul_nt(query.features, gallery.features)?;
    let mut out = Vec::new();
    for q in 0..query.ids.len() {
        let mut order: Vec<usize> = (0..gallery.ids.len())
            .filter(|&g| !(gallery.ids[g] == query.ids[q] && gallery.cameras[g] == query.cameras[q]))
            .collect();
        order.sort_by(|&a, &b| sims[(q, b)].total_cmp(&sims[(q, a)]).then(a.cmp(&b)));
        let rel: Vec<bool> = order.iter().map(|&g| gallery.ids[g] == query.ids[q]).collect();
        if rel.iter().any(|&r| r) {
            out.push(rel);
        }
    }
    if out.is_empty() {
        return Err(Error::NoValidQueries);
    }
    Ok(out)
}

/// Average of precision@rank over the relevant positions.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn mean_ap(query: RetrievalSet, gallery: RetrievalSet) -> Result<f64> {
    let ranked = ranked_matches(query, gallery)?;
    Ok(ranked.iter().map(|r| average_precision(r)).sum::<f64>() / ranked.len() as f64)
}

/// Fraction of queries with a correct match within the top `r`, per `r`.
pub fn cmc(query: RetrievalSet, gallery: RetrievalSet, ranks: &[usize]) -> Result<Vec<f64>> {
    let ranked = ranked_matches(query, gallery)?;
    let first: Vec<usize> = ranked.iter().map(|r| r.iter().position(|&x| x).unwrap()).collect();
    Ok(ranks
        .iter()
        .map(|&r| first.iter().filter(|&&f| f < r).count() as f64 / first.len() as f64)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
}

pub fn retrieval_metrics(query: RetrievalSet, gallery: RetrievalSet) -> Result<RetrievalMetrics> {
    let c = cmc(query, gallery, &[1, 5, 10])?;
    Ok(RetrievalMetrics {
        map: mean_ap(query, gallery)?,
        top1: c[0],
        top5: c[1],
        top10: c[2],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub nmi: f64,
    pub ari: f64,
    pub purity: f64,
    pub noise_rate: f64,
}

fn comb2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// NMI (arithmetic-mean normalization), ARI, purity and pseudo-label noise
/// rate of `pred` against `truth`.
///
/// Noise predictions (`None`) are treated as singleton clusters for NMI, ARI
/// and purity, and always count as wrongly labeled in `noise_rate`.
pub fn cluster_metrics(pred: &[Option<usize>], truth: &[usize]) -> Result<ClusterMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    let n = pred.len();
    if n == 0 {
        return Err(Error::InsufficientData("empty labeling".into()));
    }
    // dense cluster ids, with noise samples as singletons
    let mut pmap: BTreeMap<Option<usize>, usize> = BTreeMap::new();
    let mut pred_dense = Vec::with_capacity(n);
    let mut singleton = 0;
    for p in pred {
        let id = match p {
            Some(_) => {
                let next = pmap.len();
                *pmap.entry(*p).or_insert(next)
            }
            None => {
                singleton += 1;
                usize::MAX - singleton
            }
        };
        pred_dense.push(id);
    }
    let mut contingency: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut a: BTreeMap<usize, usize> = BTreeMap::new();
    let mut b: BTreeMap<usize, usize> = BTreeMap::new();
    for (&p, &t) in pred_dense.iter().zip(truth) {
        *contingency.entry((p, t)).or_default() += 1;
        *a.entry(p).or_default() += 1;
        *b.entry(t).or_default() += 1;
    }
    let nf = n as f64;

    let hp = entropy(a.values().cloned(), nf);
    let ht = entropy(b.values().cloned(), nf);
    let mi: f64 = contingency
        .iter()
        .map(|(&(p, t), &c)| {
            let c = c as f64;
            c / nf * (c * nf / (a[&p] as f64 * b[&t] as f64)).ln()
        })
        .sum();
    let nmi = if hp + ht == 0.0 {
        1.0
    } else {
        (2.0 * mi / (hp + ht)).clamp(0.0, 1.0)
    };

    let index: f64 = contingency.values().map(|&c| comb2(c)).sum();
    let sum_a: f64 = a.values().map(|&c| comb2(c)).sum();
    let sum_b: f64 = b.values().map(|&c| comb2(c)).sum();
    let expected = sum_a * sum_b / comb2(n).max(f64::MIN_POSITIVE);
    let max_index = 0.5 * (sum_a + sum_b);
    let ari = if (max_index - expected).abs() < 1e-12 {
        1.0
    } else {
        (index - expected) / (max_index - expected)
    };

    let mut majority: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&(p, t), &c) in &contingency {
        let e = majority.entry(p).or_insert((t, 0));
        if c > e.1 || (c == e.1 && t < e.0) {
            *e = (t, c);
        }
    }
    let correct: usize = majority.values().map(|&(_, c)| c).sum();
    let purity = correct as f64 / nf;
    let wrong = pred_dense
        .iter()
        .zip(pred)
        .zip(truth)
        .filter(|((d, p), t)| p.is_none() || majority[d].0 != **t)
        .count();

    Ok(ClusterMetrics {
        nmi,
        ari,
        purity,
        noise_rate: wrong as f64 / nf,
    })
}

/// Convenience for fully labeled predictions.
pub fn cluster_metrics_hard(pred: &[usize], truth: &[usize]) -> Result<ClusterMetrics> {
    let wrapped: Vec<Option<usize>> = pred.iter().map(|&p| Some(p)).collect();
    cluster_metrics(&wrapped, truth)
}

/// Everything reported for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub nmi: f64,
    pub ari: f64,
    pub purity: f64,
    pub noise_rate: f64,
}

impl EvalReport {
    pub fn new(r: RetrievalMetrics, c: ClusterMetrics) -> Self {
        Self {
            map: r.map,
            top1: r.top1,
            top5: r.top5,
            top10: r.top10,
            nmi: c.nmi,
            ari: c.ari,
            purity: c.purity,
            noise_rate: c.noise_rate,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.map,
            self.top1,
            self.top5,
            self.top10,
            self.nmi,
            self.ari,
            self.purity,
            self.noise_rate,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set<'a>(f: &'a Matrix, ids: &'a [usize], cams: &'a [usize]) -> RetrievalSet<'a> {
        RetrievalSet {
            features: f,
            ids,
            cameras: cams,
        }
    }

    #[test]
    fn single_match_at_rank_one() {
        let q = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let g = Matrix::from_rows(&[[0.9, 0.1], [0.0, 1.0]]).unwrap();
        let m = mean_ap(set(&q, &[0], &[0]), set(&g, &[0, 1], &[1, 1])).unwrap();
        assert_eq!(m, 1.0);
        let c = cmc(set(&q, &[0], &[0]), set(&g, &[0, 1], &[1, 1]), &[1, 5]).unwrap();
        assert_eq!(c, vec![1.0, 1.0]);
    }

    #[test]
    fn matches_at_ranks_one_and_three() {
        assert!((average_precision(&[true, false, true, false]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let q = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let g = Matrix::from_rows(&[[1.0, 0.0], [0.9, 0.1], [0.8, 0.2], [0.0, 1.0]]).unwrap();
        let m = mean_ap(set(&q, &[0], &[0]), set(&g, &[0, 1, 0, 2], &[1, 1, 1, 1])).unwrap();
        assert!((m - 0.8333333333333334).abs() < 1e-12);
    }

    #[test]
    fn match_at_rank_two() {
        let q = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let g = Matrix::from_rows(&[[1.0, 0.0], [0.9, 0.1]]).unwrap();
        let c = cmc(set(&q, &[0], &[0]), set(&g, &[1, 0], &[1, 1]), &[1, 5]).unwrap();
        assert_eq!(c, vec![0.0, 1.0]);
    }

    #[test]
    fn same_camera_matches_excluded() {
        let q = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let g = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert_eq!(
            mean_ap(set(&q, &[0], &[0]), set(&g, &[0], &[0])).unwrap_err(),
            Error::NoValidQueries
        );
    }

    #[test]
    fn perfect_clustering() {
        let m = cluster_metrics_hard(&[2, 2, 0, 0, 1], &[0, 0, 1, 1, 2]).unwrap();
        assert!((m.nmi - 1.0).abs() < 1e-12);
        assert!((m.ari - 1.0).abs() < 1e-12);
        assert_eq!(m.purity, 1.0);
        assert_eq!(m.noise_rate, 0.0);
    }

    #[test]
    fn constant_prediction() {
        let m = cluster_metrics_hard(&[0; 6], &[0, 0, 0, 1, 1, 2]).unwrap();
        assert!(m.ari.abs() < 1e-12);
        assert_eq!(m.purity, 0.5);
        assert_eq!(m.nmi, 0.0);
    }

    #[test]
    fn twelve_sample_hand_computation() {
        let pred = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
        let truth = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 0];
        // contingency rows (pred) x cols (truth): [3,1,0],[0,3,1],[1,0,3]
        let m = cluster_metrics_hard(&pred, &truth).unwrap();
        let n = 12.0f64;
        let cells = [3.0, 1.0, 3.0, 1.0, 1.0, 3.0f64];
        let mi: f64 = cells.iter().map(|&c| c / n * (c * n / 16.0).ln()).sum();
        let h = 3f64.ln();
        assert!((m.nmi - mi / h).abs() < 1e-12);
        let index = 3.0 * 3.0; // three cells of 3 -> C(3,2)=3 each
        let sum_ab = 3.0 * 6.0; // each marginal is 4 -> C(4,2)=6, three of them
        let expected = sum_ab * sum_ab / 66.0;
        let ari = (index - expected) / (sum_ab - expected);
        assert!((m.ari - ari).abs() < 1e-12);
        assert_eq!(m.purity, 9.0 / 12.0);
        assert_eq!(m.noise_rate, 3.0 / 12.0);
    }

    #[test]
    fn noise_labels_count_as_wrong() {
        let m = cluster_metrics(&[Some(0), Some(0), None, Some(1)], &[0, 0, 0, 1]).unwrap();
        assert_eq!(m.noise_rate, 0.25);
        assert_eq!(m.purity, 1.0);
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(
            cluster_metrics_hard(&[0, 1], &[0]).unwrap_err(),
            Error::LengthMismatch(2, 1)
        );
    }
}
