//! Per-granularity prototype classifiers.
//!
//! A group holds `K` unit-norm prototypes; class probabilities are a
//! temperature softmax over cosine similarities to them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, matmul_nt, softmax_in_place, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeMode {
    /// Prototypes are cluster means and never receive gradients.
    Nonparametric,
    /// Prototypes are trained by gradient descent only.
    Parametric,
    /// Re-anchored to cluster means at each clustering, trained in between.
    Hybrid,
}

impl PrototypeMode {
    pub fn trains(&self) -> bool {
        !matches!(self, PrototypeMode::Nonparametric)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeGroup {
    /// `K x D`, unit-norm rows.
    pub centers: Matrix,
    pub tau: f64,
    pub mode: PrototypeMode,
    pub group_id: usize,
}

/// Tolerance for a column of `Q` to count as a distribution.
const DIST_TOL: f64 = 1e-6;

impl PrototypeGroup {
    pub fn new(centers: Matrix, tau: f64, mode: PrototypeMode, group_id: usize) -> Result<Self> {
        if centers.rows() == 0 {
            return Err(Error::InvalidConfig("prototype group needs K >= 1".into()));
        }
        if !(tau > 0.0) {
            return Err(Error::NonPositiveTemperature(tau));
        }
        Ok(Self {
            centers: l2_normalize_rows(&centers)?,
            tau,
            mode,
            group_id,
        })
    }

    pub fn k(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    /// `K x N` matrix whose column `i` is `softmax(C f_i / tau)`.
    pub fn probs(&self, features: &Matrix) -> Result<Matrix> {
        let logits = matmul_nt(&self.centers, features).map_err(|_| {
            Error::ShapeMismatch(format!(
                "prototypes have dim {}, features {}",
                self.dim(),
                features.cols()
            ))
        })?;
        let mut t = logits.transpose();
        for i in 0..t.rows() {
            softmax_in_place(t.row_mut(i), self.tau);
        }
        Ok(t.transpose())
    }

    /// Each prototype becomes the normalized mean of the features carrying its
    /// label; classes without members keep their previous prototype.
    pub fn update_nonparametric(&self, features: &Matrix, labels: &[Option<usize>]) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::LengthMismatch(labels.len(), features.rows()));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&l| l >= self.k()) {
            return Err(Error::InvalidConfig(format!("label {bad} >= K={}", self.k())));
        }
        let centers = crate::clustering::cluster_means(features, labels, self.k(), Some(&self.centers));
        Ok(Self {
            centers,
            ..self.clone()
        })
    }

    /// Soft cross-entropy `-(1/N) sum_i sum_k q_ki ln p_ki` against targets
    /// `q` (`K x N`, columns are distributions) and its gradients w.r.t. the
    /// prototypes and the features.
    pub fn grad_parametric(&self, features: &Matrix, q: &Matrix) -> Result<(f64, Matrix, Matrix)> {
        let n = features.rows();
        if q.shape() != (self.k(), n) {
            return Err(Error::ShapeMismatch(format!(
                "targets {:?}, expected {:?}",
                q.shape(),
                (self.k(), n)
            )));
        }
        validate_columns(q)?;
        let p = self.probs(features)?;
        let scale = 1.0 / (n as f64 * self.tau);
        let mut loss = 0.0;
        let mut grad_c = Matrix::zeros(self.k(), self.dim());
        let mut grad_f = Matrix::zeros(n, self.dim());
        for i in 0..n {
            let f = features.row(i);
            for k in 0..self.k() {
                let (pk, qk) = (p[(k, i)], q[(k, i)]);
                if qk > 0.0 {
                    loss -= qk * pk.max(f64::MIN_POSITIVE).ln();
                }
                let d = scale * (pk - qk);
                if d == 0.0 {
                    continue;
                }
                for (g, fv) in grad_c.row_mut(k).iter_mut().zip(f) {
                    *g += d * fv;
                }
                for (g, cv) in grad_f.row_mut(i).iter_mut().zip(self.centers.row(k)) {
                    *g += d * cv;
                }
            }
        }
        Ok((loss / n as f64, grad_c, grad_f))
    }

    /// Applies a prototype gradient step and re-normalizes the rows.
    pub fn apply_step(&mut self, step: impl FnOnce(&mut [f64])) -> Result<()> {
        step(self.centers.as_mut_slice());
        self.centers = l2_normalize_rows(&self.centers)?;
        Ok(())
    }
}

fn validate_columns(q: &Matrix) -> Result<()> {
    for (i, s) in q.col_sums().iter().enumerate() {
        if (s - 1.0).abs() > DIST_TOL || (0..q.rows()).any(|r| !(q[(r, i)] >= 0.0)) {
            return Err(Error::InvalidDistribution(i));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(rows: &[[f64; 2]], tau: f64) -> PrototypeGroup {
        PrototypeGroup::new(Matrix::from_rows(rows).unwrap(), tau, PrototypeMode::Hybrid, 0).unwrap()
    }

    #[test]
    fn equal_prototypes_give_uniform_columns() {
        let g = group(&[[1.0, 0.0], [1.0, 0.0]], 0.1);
        let f = Matrix::from_rows(&[[0.6, 0.8], [0.0, 1.0]]).unwrap();
        let p = g.probs(&f).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn orthogonal_prototypes_logistic() {
        let g = group(&[[1.0, 0.0], [0.0, 1.0]], 1.0);
        let p = g.probs(&Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        assert!((p[(0, 0)] - 0.7310585786300049).abs() < 1e-12);
        assert!((p[(1, 0)] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn small_tau_sharpens() {
        let g = group(&[[1.0, 0.0], [0.0, 1.0]], 0.01);
        let p = g.probs(&Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        assert!(1.0 - p[(0, 0)] < 1e-15 && p[(1, 0)] < 1e-40);
    }

    #[test]
    fn probs_shape_mismatch() {
        let g = group(&[[1.0, 0.0]], 1.0);
        assert!(matches!(g.probs(&Matrix::zeros(1, 3)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn nonparametric_examples() {
        let g = group(&[[1.0, 0.0], [0.0, 1.0]], 1.0);
        let f = Matrix::from_rows(&[[0.6, 0.8], [0.8, -0.6]]).unwrap();
        let u = g.update_nonparametric(&f, &[Some(0), Some(1)]).unwrap();
        assert_eq!(u.centers, f);

        let f = Matrix::from_rows(&[[0.6, 0.8], [0.6, 0.8]]).unwrap();
        let u = g.update_nonparametric(&f, &[Some(1), Some(1)]).unwrap();
        assert!(u
            .centers
            .row(1)
            .iter()
            .zip([0.6, 0.8])
            .all(|(a, b)| (a - b).abs() < 1e-15));
        // class 0 has no members and keeps its prototype
        assert_eq!(u.centers.row(0), &[1.0, 0.0]);

        let f = Matrix::identity(2);
        let u = g.update_nonparametric(&f, &[Some(0), Some(0)]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(u.centers.row(0).iter().all(|v| (v - h).abs() < 1e-15));
    }

    #[test]
    fn nonparametric_rejects_bad_label() {
        let g = group(&[[1.0, 0.0]], 1.0);
        assert!(g
            .update_nonparametric(&Matrix::identity(2), &[Some(0), Some(3)])
            .is_err());
    }

    #[test]
    fn matching_targets_zero_gradient() {
        let g = group(&[[1.0, 0.0], [0.6, 0.8]], 0.5);
        let f = Matrix::from_rows(&[[0.0, 1.0], [0.8, 0.6]]).unwrap();
        let p = g.probs(&f).unwrap();
        let (_, gc, gf) = g.grad_parametric(&f, &p).unwrap();
        assert!(gc.as_slice().iter().chain(gf.as_slice()).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn single_sample_finite_differences() {
        let g = group(&[[0.8, 0.6], [-0.28, 0.96]], 0.7);
        let f = Matrix::from_rows(&[[0.3, -0.9]]).unwrap();
        let q = Matrix::from_rows(&[[0.2], [0.8]]).unwrap();
        let (_, gc, gf) = g.grad_parametric(&f, &q).unwrap();
        let eps = 1e-6;
        let loss = |g: &PrototypeGroup, f: &Matrix| g.grad_parametric(f, &q).unwrap().0;
        for idx in 0..2 {
            let mut fp = f.clone();
            let mut fm = f.clone();
            fp.as_mut_slice()[idx] += eps;
            fm.as_mut_slice()[idx] -= eps;
            let fd = (loss(&g, &fp) - loss(&g, &fm)) / (2.0 * eps);
            assert!((fd - gf.as_slice()[idx]).abs() <= 1e-6 * fd.abs().max(1e-3));
        }
        for idx in 0..4 {
            // perturb raw centers without renormalizing
            let mut gp = g.clone();
            let mut gm = g.clone();
            gp.centers.as_mut_slice()[idx] += eps;
            gm.centers.as_mut_slice()[idx] -= eps;
            let fd = (loss(&gp, &f) - loss(&gm, &f)) / (2.0 * eps);
            assert!((fd - gc.as_slice()[idx]).abs() <= 1e-6 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn non_distribution_targets_rejected() {
        let g = group(&[[1.0, 0.0], [0.0, 1.0]], 1.0);
        let f = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let q = Matrix::from_rows(&[[0.4], [0.2]]).unwrap();
        assert_eq!(g.grad_parametric(&f, &q).unwrap_err(), Error::InvalidDistribution(0));
    }
}
