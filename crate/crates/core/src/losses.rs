//! Training objectives and their analytic gradients.
//!
//! Features handed to these functions are the encoder's unit-norm outputs, so
//! cosine similarity is a plain dot product and gradients are taken w.r.t.
//! the normalized features. The encoder's backward pass carries them through
//! the normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, softmax_in_place, Matrix};
use crate::prototypes::PrototypeGroup;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub triplet: f64,
    pub group: f64,
    pub wcl: f64,
    pub triplet_margin: f64,
    pub wcl_margin: f64,
    pub wcl_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            triplet: 1.0,
            group: 1.0,
            wcl: 0.05,
            triplet_margin: 0.3,
            wcl_margin: 0.25,
            wcl_scale: 32.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.triplet, self.group, self.wcl].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if !(self.wcl_scale > 0.0) {
            return Err(Error::InvalidConfig("wcl_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Soft cross-entropy `-(1/N) sum_i sum_k q_ki ln p_ki` between given
/// probability columns.
pub fn soft_cross_entropy(p: &Matrix, q: &Matrix) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", p.shape(), q.shape())));
    }
    let n = p.cols().max(1) as f64;
    Ok(-p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .filter(|(_, &qv)| qv > 0.0)
        .map(|(&pv, &qv)| qv * pv.max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone)]
pub struct GroupCeOutput {
    pub loss: f64,
    pub per_group: Vec<f64>,
    pub grad_features: Matrix,
    pub grad_prototypes: Vec<Matrix>,
}

/// Multi-group soft cross-entropy, summed over groups.
///
/// `targets[m]` is `K_m x N` with distribution columns.
pub fn group_ce(groups: &[PrototypeGroup], features: &Matrix, targets: &[Matrix]) -> Result<GroupCeOutput> {
    if groups.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} groups but {} target matrices",
            groups.len(),
            targets.len()
        )));
    }
    let mut out = GroupCeOutput {
        loss: 0.0,
        per_group: Vec::with_capacity(groups.len()),
        grad_features: Matrix::zeros(features.rows(), features.cols()),
        grad_prototypes: Vec::with_capacity(groups.len()),
    };
    for (g, q) in groups.iter().zip(targets) {
        let (loss, gc, gf) = g.grad_parametric(features, q)?;
        out.loss += loss;
        out.per_group.push(loss);
        out.grad_features.add_scaled(&gf, 1.0)?;
        out.grad_prototypes.push(gc);
    }
    Ok(out)
}

/// Single hinge term `max(0, s_n - s_p + margin)`.
pub fn triplet_hinge(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (s_neg - s_pos + margin).max(0.0)
}

#[derive(Debug, Clone)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad_features: Matrix,
    /// Anchors that had both a positive and a negative.
    pub active_anchors: usize,
}

/// Batch-hard triplet loss on cosine similarity: each anchor pairs its least
/// similar positive with its most similar negative.
pub fn triplet_batch_hard(features: &Matrix, labels: &[usize], margin: f64) -> Result<TripletOutput> {
    let b = features.rows();
    if labels.len() != b {
        return Err(Error::LengthMismatch(labels.len(), b));
    }
    let mut picks = Vec::new();
    for a in 0..b {
        let fa = features.row(a);
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let s = dot(fa, features.row(j));
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| s < best) {
                    pos = Some((j, s));
                }
            } else if neg.is_none_or(|(_, best)| s > best) {
                neg = Some((j, s));
            }
        }
        if let (Some(p), Some(n)) = (pos, neg) {
            picks.push((a, p, n));
        }
    }
    let mut grad = Matrix::zeros(b, features.cols());
    if picks.is_empty() {
        return Ok(TripletOutput {
            loss: 0.0,
            grad_features: grad,
            active_anchors: 0,
        });
    }
    let inv = 1.0 / picks.len() as f64;
    let mut loss = 0.0;
    for &(a, (p, sp), (n, sn)) in &picks {
        let h = sn - sp + margin;
        if h <= 0.0 {
            continue;
        }
        loss += h;
        for d in 0..features.cols() {
            let (fa, fp, fnv) = (features[(a, d)], features[(p, d)], features[(n, d)]);
            grad[(a, d)] += inv * (fnv - fp);
            grad[(n, d)] += inv * fa;
            grad[(p, d)] -= inv * fa;
        }
    }
    Ok(TripletOutput {
        loss: loss * inv,
        grad_features: grad,
        active_anchors: picks.len(),
    })
}

/// Similarities of one anchor to its positives and negatives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSplit {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WclOutput {
    pub loss: f64,
    pub grad_pos: Vec<f64>,
    pub grad_neg: Vec<f64>,
}

/// Self-paced pair weights `([1 + m - s_p]_+, [m + s_n]_+)`.
pub fn wcl_weights(split: &PairSplit, margin: f64) -> (Vec<f64>, Vec<f64>) {
    (
        split.pos.iter().map(|s| (1.0 + margin - s).max(0.0)).collect(),
        split.neg.iter().map(|s| (margin + s).max(0.0)).collect(),
    )
}

/// Weighted contrastive loss
/// `ln(1 + sum_j exp(g a_n_j (s_n_j - m)) * sum_k exp(-g a_p_k (s_p_k - 1 + m)))`.
///
/// The pair weights are treated as constants when differentiating.
pub fn weighted_contrastive(split: &PairSplit, margin: f64, scale: f64) -> WclOutput {
    let (ap, an) = wcl_weights(split, margin);
    weighted_contrastive_fixed(split, &ap, &an, margin, scale)
}

/// [`weighted_contrastive`] with explicitly supplied pair weights.
pub fn weighted_contrastive_fixed(
    split: &PairSplit,
    alpha_pos: &[f64],
    alpha_neg: &[f64],
    margin: f64,
    scale: f64,
) -> WclOutput {
    if split.pos.is_empty() || split.neg.is_empty() {
        return WclOutput {
            loss: 0.0,
            grad_pos: vec![0.0; split.pos.len()],
            grad_neg: vec![0.0; split.neg.len()],
        };
    }
    let mut lp: Vec<f64> = split
        .pos
        .iter()
        .zip(alpha_pos)
        .map(|(s, a)| -scale * a * (s - 1.0 + margin))
        .collect();
    let mut ln: Vec<f64> = split
        .neg
        .iter()
        .zip(alpha_neg)
        .map(|(s, a)| scale * a * (s - margin))
        .collect();
    let z = log_sum_exp(lp.iter().cloned()) + log_sum_exp(ln.iter().cloned());
    // softplus(z), stable for both signs
    let loss = z.max(0.0) + (-z.abs()).exp().ln_1p();
    let sig = 1.0 / (1.0 + (-z).exp());
    softmax_in_place(&mut lp, 1.0);
    softmax_in_place(&mut ln, 1.0);
    WclOutput {
        loss,
        grad_pos: lp.iter().zip(alpha_pos).map(|(w, a)| -sig * w * scale * a).collect(),
        grad_neg: ln.iter().zip(alpha_neg).map(|(w, a)| sig * w * scale * a).collect(),
    }
}

/// Component losses of one target step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub triplet: f64,
    pub group: f64,
    pub wcl: f64,
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    w.triplet * parts.triplet + w.group * parts.group + w.wcl * parts.wcl
}

/// Linear classification head used for source pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `classes x D`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn new(classes: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (classes + dim) as f64).sqrt();
        let data = (0..classes * dim).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            weights: Matrix::from_vec(classes, dim, data).unwrap(),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    /// `B x classes`
    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        let mut z = crate::numerics::matmul_nt(features, &self.weights)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    /// Returns `(grad_weights, grad_bias, grad_features)`.
    pub fn backward(&self, features: &Matrix, grad_logits: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
        let mut gw = Matrix::zeros(self.weights.rows(), self.weights.cols());
        let mut gb = vec![0.0; self.classes()];
        let mut gf = Matrix::zeros(features.rows(), features.cols());
        for i in 0..features.rows() {
            for c in 0..self.classes() {
                let g = grad_logits[(i, c)];
                if g == 0.0 {
                    continue;
                }
                gb[c] += g;
                for d in 0..features.cols() {
                    gw[(c, d)] += g * features[(i, d)];
                    gf[(i, d)] += g * self.weights[(c, d)];
                }
            }
        }
        (gw, gb, gf)
    }

    pub fn flat_len(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    pub fn flatten_grads(gw: &Matrix, gb: &[f64]) -> Vec<f64> {
        gw.as_slice().iter().chain(gb).cloned().collect()
    }

    pub fn apply(&mut self, step: impl FnOnce(&mut [f64])) {
        let mut flat: Vec<f64> = self.weights.as_slice().iter().chain(&self.bias).cloned().collect();
        step(&mut flat);
        let nw = self.weights.as_slice().len();
        self.weights.as_mut_slice().copy_from_slice(&flat[..nw]);
        self.bias.copy_from_slice(&flat[nw..]);
    }
}

#[derive(Debug, Clone)]
pub struct SourceLossOutput {
    pub loss: f64,
    pub ce: f64,
    pub triplet: f64,
    pub grad_features: Matrix,
    pub grad_logits: Matrix,
}

/// Hard-label cross-entropy over `logits` plus batch-hard triplet on
/// `features`, equally weighted.
pub fn source_supervised_loss(
    features: &Matrix,
    logits: &Matrix,
    labels: &[usize],
    margin: f64,
) -> Result<SourceLossOutput> {
    let b = features.rows();
    if logits.rows() != b || labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} features, {} logit rows, {} labels",
            b,
            logits.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::ShapeMismatch(format!(
            "label {bad} >= {} classes",
            logits.cols()
        )));
    }
    let mut grad_logits = Matrix::zeros(b, logits.cols());
    let mut ce = 0.0;
    for i in 0..b {
        let row = grad_logits.row_mut(i);
        row.copy_from_slice(logits.row(i));
        let lse = log_sum_exp(row.iter().cloned());
        ce += lse - logits[(i, labels[i])];
        softmax_in_place(row, 1.0);
        row[labels[i]] -= 1.0;
        row.iter_mut().for_each(|v| *v /= b as f64);
    }
    ce /= b as f64;
    let tri = triplet_batch_hard(features, labels, margin)?;
    Ok(SourceLossOutput {
        loss: ce + tri.loss,
        ce,
        triplet: tri.loss,
        grad_features: tri.grad_features,
        grad_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::PrototypeMode;

    #[test]
    fn soft_ce_one_hot_vs_uniform() {
        let p = Matrix::filled(4, 1, 0.25);
        let q = Matrix::from_rows(&[[0.0], [1.0], [0.0], [0.0]]).unwrap();
        assert!((soft_cross_entropy(&p, &q).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn group_ce_at_match_is_entropy_with_zero_grad() {
        let g = PrototypeGroup::new(
            Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap(),
            0.5,
            PrototypeMode::Hybrid,
            0,
        )
        .unwrap();
        let f = Matrix::from_rows(&[[0.8, 0.6], [-0.6, 0.8]]).unwrap();
        let p = g.probs(&f).unwrap();
        let out = group_ce(std::slice::from_ref(&g), &f, std::slice::from_ref(&p)).unwrap();
        let entropy = -p.as_slice().iter().map(|v| v * v.ln()).sum::<f64>() / 2.0;
        assert!((out.loss - entropy).abs() < 1e-12);
        assert!(out.grad_features.as_slice().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn group_ce_is_additive() {
        let g1 = PrototypeGroup::new(Matrix::identity(2), 0.3, PrototypeMode::Hybrid, 0).unwrap();
        let g2 = PrototypeGroup::new(
            Matrix::from_rows(&[[0.6, 0.8], [0.8, -0.6], [-1.0, 0.0]]).unwrap(),
            0.3,
            PrototypeMode::Hybrid,
            1,
        )
        .unwrap();
        let f = Matrix::from_rows(&[[0.28, 0.96]]).unwrap();
        let q1 = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let q2 = Matrix::from_rows(&[[0.2], [0.3], [0.5]]).unwrap();
        let both = group_ce(&[g1.clone(), g2.clone()], &f, &[q1.clone(), q2.clone()]).unwrap();
        let a = group_ce(&[g1], &f, &[q1]).unwrap();
        let b = group_ce(&[g2], &f, &[q2]).unwrap();
        assert!((both.loss - a.loss - b.loss).abs() < 1e-15);
        assert_eq!(both.per_group, vec![a.loss, b.loss]);
    }

    #[test]
    fn triplet_hinge_examples() {
        assert!((triplet_hinge(0.5, 0.9, 0.0) - 0.4).abs() < 1e-15);
        assert_eq!(triplet_hinge(0.9, 0.1, 0.3), 0.0);
    }

    #[test]
    fn triplet_picks_hardest_pairs() {
        let f = Matrix::from_rows(&[[1.0, 0.0], [0.6, 0.8], [0.8, 0.6], [0.0, 1.0]]).unwrap();
        // anchor 0: positives {1}; negatives {2, 3} -> hardest negative 2 (0.8)
        let out = triplet_batch_hard(&f, &[0, 0, 1, 1], 0.0).unwrap();
        assert_eq!(out.active_anchors, 4);
        // anchor0: 0.8 - 0.6; anchor1: max(0.96, 0.8) - 0.6; anchor2: 0.96 - 0.6; anchor3: 0.8 - 0.6
        let expected = (0.2 + 0.36 + 0.36 + 0.2) / 4.0;
        assert!((out.loss - expected).abs() < 1e-12, "{}", out.loss);
    }

    #[test]
    fn triplet_skips_anchors_without_pairs() {
        let f = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap();
        let out = triplet_batch_hard(&f, &[0, 1, 2], 0.3).unwrap();
        assert_eq!(out.active_anchors, 0);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn wcl_margin_balanced_is_ln2() {
        let split = PairSplit {
            pos: vec![0.7],
            neg: vec![0.3],
        };
        for gamma in [1.0, 32.0, 256.0] {
            let out = weighted_contrastive(&split, 0.3, gamma);
            assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn wcl_empty_side_is_zero() {
        let out = weighted_contrastive(
            &PairSplit {
                pos: vec![0.5],
                neg: vec![],
            },
            0.3,
            32.0,
        );
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grad_pos, vec![0.0]);
        let out = weighted_contrastive(&PairSplit::default(), 0.3, 32.0);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn wcl_cut_off_negative() {
        let out = weighted_contrastive(
            &PairSplit {
                pos: vec![0.9],
                neg: vec![-0.5],
            },
            0.3,
            32.0,
        );
        // log(1 + e^-2.56), evaluated in 40-digit arithmetic
        assert!((out.loss - 0.074_462_311_208_430_37).abs() < 1e-15, "{}", out.loss);
        assert_eq!(out.grad_neg, vec![0.0]);
    }

    #[test]
    fn total_loss_examples() {
        let parts = LossParts {
            triplet: 0.4,
            group: 1.0,
            wcl: 0.2,
        };
        let zero = LossWeights {
            triplet: 0.0,
            group: 0.0,
            wcl: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&parts, &zero), 0.0);
        assert!((total_loss(&parts, &LossWeights::default()) - 1.41).abs() < 1e-12);
        let only = LossWeights {
            triplet: 0.0,
            group: 3.0,
            wcl: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&parts, &only), 3.0);
    }

    #[test]
    fn source_loss_uniform_logits() {
        let f = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let logits = Matrix::zeros(2, 5);
        let out = source_supervised_loss(&f, &logits, &[0, 3], 0.3).unwrap();
        assert!((out.ce - 5f64.ln()).abs() < 1e-14);
        assert_eq!(out.triplet, 0.0);
    }

    #[test]
    fn source_loss_perfect_case() {
        let f = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let logits = Matrix::from_rows(&[[50.0, 0.0], [50.0, 0.0], [0.0, 50.0], [0.0, 50.0]]).unwrap();
        let out = source_supervised_loss(&f, &logits, &[0, 0, 1, 1], 0.3).unwrap();
        assert!(out.ce < 1e-20);
        assert_eq!(out.triplet, 0.0);
    }

    #[test]
    fn source_loss_shape_errors() {
        let f = Matrix::zeros(2, 2);
        assert!(source_supervised_loss(&f, &Matrix::zeros(3, 2), &[0, 1], 0.3).is_err());
        assert!(source_supervised_loss(&f, &Matrix::zeros(2, 2), &[0, 2], 0.3).is_err());
    }
}
