//! Helpers shared by the integration tests: random instances, finite
//! differences and small brute-force oracles.
#![allow(dead_code)]

use std::path::PathBuf;

use otl::numerics::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-6;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    otl::numerics::l2_normalize_rows(&gaussian(rows, cols, rng)).unwrap()
}

/// Random `K x N` joint distribution: positive entries, columns summing to `1/N`.
pub fn random_joint(k: usize, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut p = Matrix::zeros(k, n);
    for i in 0..n {
        let col: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = col.iter().sum();
        for (r, v) in col.into_iter().enumerate() {
            p[(r, i)] = v / (s * n as f64);
        }
    }
    p
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|j| {
            work[j] = x[j] + FD_STEP;
            let up = f(&work);
            work[j] = x[j] - FD_STEP;
            let down = f(&work);
            work[j] = x[j];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `max_j |a_j - b_j| / max(max_j |b_j|, 1e-8)`: error relative to the size
/// of the numerical gradient.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

/// All permutations of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, a, out);
            let j = if k.is_multiple_of(2) { i } else { 0 };
            a.swap(j, k - 1);
        }
    }
    let mut out = Vec::new();
    heap(n, &mut (0..n).collect(), &mut out);
    out
}

/// Minimizes a convex function on `[lo, hi]` by golden-section search.
pub fn golden_min(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// True when no anchor's hardest positive or negative is tied within `gap`
/// and no hinge sits within `gap` of its kink.
pub fn triplet_smooth(features: &Matrix, labels: &[usize], margin: f64, gap: f64) -> bool {
    let b = features.rows();
    for a in 0..b {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for j in (0..b).filter(|&j| j != a) {
            let s = otl::numerics::dot(features.row(a), features.row(j));
            if labels[j] == labels[a] {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        pos.sort_by(f64::total_cmp);
        neg.sort_by(|x, y| y.total_cmp(x));
        if pos.len() > 1 && pos[1] - pos[0] < gap {
            return false;
        }
        if neg.len() > 1 && neg[0] - neg[1] < gap {
            return false;
        }
        if (neg[0] - pos[0] + margin).abs() < gap {
            return false;
        }
    }
    true
}
