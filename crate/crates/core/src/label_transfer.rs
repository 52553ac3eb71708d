//! Soft pseudo-label refinement by entropy-regularized optimal transport.
//!
//! Given the model's joint probabilities `P` (K classes x N samples), find
//! `Q = diag(alpha) P^lambda diag(beta)` on the transport polytope with row
//! sums `w` and column sums `c`. The scalings come from Sinkhorn-Knopp
//! iterations, carried out on `log alpha`/`log beta` so that `P^lambda`
//! never has to be materialized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, matmul_nt, Matrix};

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-300;

/// Marginals `w` (per class) and `c` (per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPolytope {
    row: Vec<f64>,
    col: Vec<f64>,
}

impl TransportPolytope {
    pub fn new(row: Vec<f64>, col: Vec<f64>) -> Result<Self> {
        if row.is_empty() || col.is_empty() {
            return Err(Error::ShapeMismatch("empty marginal".into()));
        }
        for (name, m) in [("row", &row), ("column", &col)] {
            if m.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} marginal must be positive")));
            }
            let s: f64 = m.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidConfig(format!("{name} marginal sums to {s}, not 1")));
            }
        }
        Ok(Self { row, col })
    }

    /// Normalizes arbitrary positive class weights (e.g. source class
    /// frequencies) into a row marginal, with a uniform column marginal.
    pub fn with_row_weights(weights: &[f64], n: usize) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if !(s > 0.0) {
            return Err(Error::InvalidConfig("row weights must have positive sum".into()));
        }
        Self::new(weights.iter().map(|w| w / s).collect(), vec![1.0 / n as f64; n])
    }

    pub fn row(&self) -> &[f64] {
        &self.row
    }

    pub fn col(&self) -> &[f64] {
        &self.col
    }

    pub fn k(&self) -> usize {
        self.row.len()
    }

    pub fn n(&self) -> usize {
        self.col.len()
    }
}

/// Equipartition: every class gets `1/K` of the mass, every sample `1/N`.
pub fn uniform_polytope(k: usize, n: usize) -> TransportPolytope {
    assert!(k >= 1 && n >= 1, "polytope needs K, N >= 1");
    TransportPolytope {
        row: vec![1.0 / k as f64; k],
        col: vec![1.0 / n as f64; n],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Exponent on `P`; larger is sharper.
    pub lambda: f64,
    /// Stop once the relative L1 change of `alpha` drops below this...
    pub tol: f64,
    /// ...and the L-infinity marginal error is below this.
    pub marginal_tol: f64,
    pub max_iter: usize,
    /// Newton steps on the dual allowed after `max_iter` scaling iterations
    /// fail to reach `marginal_tol`; 0 disables the polish.
    pub newton_steps: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 25.0,
            tol: 0.1,
            marginal_tol: 1e-6,
            max_iter: 1000,
            newton_steps: 100,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.tol > 0.0) || !(self.marginal_tol > 0.0) {
            return Err(Error::InvalidConfig(
                "sinkhorn lambda, tol and marginal_tol must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Marginal error above which a run that hit `max_iter` is reported.
pub const NOT_CONVERGED_ERR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornOutput {
    /// `K x N` assignment on the polytope.
    pub q: Matrix,
    pub iters: usize,
    /// Newton polish steps taken after the scaling iterations.
    pub newton_steps: usize,
    /// Max absolute deviation of any row or column sum from its target.
    pub marginal_err: f64,
    pub converged: bool,
    pub log_alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
}

impl SinkhornOutput {
    /// `Err(NotConverged)` when the iteration cap was hit with a marginal
    /// error above [`NOT_CONVERGED_ERR`].
    pub fn check(&self) -> Result<()> {
        if !self.converged && self.marginal_err > NOT_CONVERGED_ERR {
            return Err(Error::NotConverged {
                iters: self.iters,
                marginal_err: self.marginal_err,
            });
        }
        Ok(())
    }
}

/// Checks the joint-probability contract: entries in (0, 1] and every column
/// summing to `1/N`.
pub fn validate_joint(p: &Matrix) -> Result<()> {
    let n = p.cols() as f64;
    if p.as_slice().iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::InvalidDistribution(0));
    }
    for (i, s) in p.col_sums().iter().enumerate() {
        if (s - 1.0 / n).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(i));
        }
    }
    Ok(())
}

/// Sinkhorn-Knopp on a joint probability matrix `P` (`K x N`).
pub fn sinkhorn(p: &Matrix, poly: &TransportPolytope, cfg: &SinkhornConfig) -> Result<SinkhornOutput> {
    let log_p = p.map(|v| v.max(PROB_FLOOR).ln());
    sinkhorn_log(&log_p, poly, cfg)
}

/// Same as [`sinkhorn`] but takes `log P` directly.
pub fn sinkhorn_log(log_p: &Matrix, poly: &TransportPolytope, cfg: &SinkhornConfig) -> Result<SinkhornOutput> {
    cfg.validate()?;
    let (k, n) = log_p.shape();
    if poly.k() != k || poly.n() != n {
        return Err(Error::ShapeMismatch(format!(
            "P is {k}x{n} but polytope is {}x{}",
            poly.k(),
            poly.n()
        )));
    }
    if log_p.as_slice().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::InvalidDistribution(0));
    }
    let log_kernel = log_p.scale(cfg.lambda);
    let log_w: Vec<f64> = poly.row.iter().map(|v| v.ln()).collect();
    let log_c: Vec<f64> = poly.col.iter().map(|v| v.ln()).collect();

    // alpha_0 = c, beta_0 = w, both constant under the polytope's scale
    let mut log_alpha = vec![-(n as f64).ln(); k];
    let mut log_beta = vec![-(k as f64).ln(); n];
    let mut scaled = StabilizedKernel::new(&log_kernel, &log_alpha, &log_beta);
    let mut row_lse = vec![0.0; k];
    let mut col_lse = vec![0.0; n];
    let mut alpha_change = f64::INFINITY;
    let mut row_err = f64::INFINITY;
    let mut iters = 0;
    let mut converged = false;

    while iters < cfg.max_iter {
        scaled.row_lse(&log_kernel, &log_beta, &mut row_lse);
        if iters > 0 {
            row_err = (0..k)
                .map(|r| ((log_alpha[r] + row_lse[r]).exp() - poly.row[r]).abs())
                .fold(0.0, f64::max);
            if alpha_change < cfg.tol && row_err < cfg.marginal_tol {
                converged = true;
                break;
            }
        }
        iters += 1;
        alpha_change = 0.0;
        for r in 0..k {
            let next = log_w[r] - row_lse[r];
            alpha_change += ((next - log_alpha[r]).exp() - 1.0).abs();
            log_alpha[r] = next;
        }
        scaled.set_row_scaling(&log_alpha);
        scaled.col_lse(&log_kernel, &log_alpha, &mut col_lse);
        for i in 0..n {
            log_beta[i] = log_c[i] - col_lse[i];
        }
        scaled.set_col_scaling(&log_beta);
        if scaled.drifted() {
            scaled = StabilizedKernel::new(&log_kernel, &log_alpha, &log_beta);
        }
    }

    let mut newton_steps = 0;
    if !converged && cfg.newton_steps > 0 {
        let warm = cfg.newton_steps.min(WARM_POLISH_STEPS);
        let mut polish = newton_polish(&log_kernel, poly, &mut log_alpha, cfg.marginal_tol, warm);
        newton_steps = polish.steps;
        if !polish.converged {
            let mut restart = vec![0.0; k];
            let homotopy = newton_homotopy(
                log_p,
                cfg.lambda,
                poly,
                &mut restart,
                cfg.marginal_tol,
                cfg.newton_steps,
            );
            newton_steps += homotopy.steps;
            if homotopy.converged {
                log_alpha = restart;
                polish = homotopy;
            }
        }
        converged = polish.converged;
        log_beta = polish.log_beta;
    }

    let mut q = Matrix::zeros(k, n);
    for r in 0..k {
        for i in 0..n {
            q[(r, i)] = (log_alpha[r] + log_kernel[(r, i)] + log_beta[i]).exp();
        }
    }
    let marginal_err = marginal_error(&q, poly);
    if !converged {
        log::debug!(
            "sinkhorn stopped at {iters} iterations, marginal error {marginal_err:e}, last row error {row_err:e}"
        );
    }
    Ok(SinkhornOutput {
        q,
        iters,
        newton_steps,
        marginal_err,
        converged,
        log_alpha,
        log_beta,
    })
}

struct Polish {
    steps: usize,
    converged: bool,
    log_beta: Vec<f64>,
}

/// The dual restricted to `log alpha`, with `log beta` eliminated so that
/// columns match exactly. Returns the dual value, `log beta` and `Q`.
fn semi_dual(log_kernel: &Matrix, poly: &TransportPolytope, log_alpha: &[f64]) -> (f64, Vec<f64>, Matrix) {
    let (k, n) = log_kernel.shape();
    let mut q = Matrix::zeros(k, n);
    let mut log_beta = vec![0.0; n];
    let mut value: f64 = poly.row.iter().zip(log_alpha).map(|(w, a)| w * a).sum();
    for i in 0..n {
        let lse = log_sum_exp((0..k).map(|r| log_kernel[(r, i)] + log_alpha[r]));
        log_beta[i] = poly.col[i].ln() - lse;
        value += poly.col[i] * log_beta[i];
        for r in 0..k {
            q[(r, i)] = (log_kernel[(r, i)] + log_alpha[r] + log_beta[i]).exp();
        }
    }
    (value, log_beta, q)
}

/// Damped Newton ascent on the concave semi-dual. Its maximizer is the
/// same fixed point the scaling iteration approaches, but Newton does not
/// stall when `Q` is nearly a hard assignment and the dual is flat.
fn newton_polish(
    log_kernel: &Matrix,
    poly: &TransportPolytope,
    log_alpha: &mut [f64],
    tol: f64,
    max_steps: usize,
) -> Polish {
    let (k, n) = log_kernel.shape();
    let (mut value, mut log_beta, mut q) = semi_dual(log_kernel, poly, log_alpha);
    let mut steps = 0;
    loop {
        let rows = q.row_sums();
        let grad: Vec<f64> = poly.row.iter().zip(&rows).map(|(w, r)| w - r).collect();
        let err = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if err < tol {
            return Polish {
                steps,
                converged: true,
                log_beta,
            };
        }
        if steps == max_steps {
            return Polish {
                steps,
                converged: false,
                log_beta,
            };
        }
        steps += 1;

        // negative Hessian diag(r) - sum_i q_i q_i^T / c_i is singular along
        // the all-ones direction; the rank-one term pins that direction
        // without changing the step, since the gradient sums to zero
        let pin = rows.iter().sum::<f64>() / (k * k) as f64;
        let mut h = nalgebra::DMatrix::<f64>::from_element(k, k, pin);
        for r in 0..k {
            h[(r, r)] += rows[r];
        }
        for i in 0..n {
            let inv_c = 1.0 / poly.col[i];
            for a in 0..k {
                let qa = q[(a, i)] * inv_c;
                if qa == 0.0 {
                    continue;
                }
                for b in 0..k {
                    h[(a, b)] -= qa * q[(b, i)];
                }
            }
        }
        let g = nalgebra::DVector::from_column_slice(&grad);
        let dir: Vec<f64> = match h.cholesky() {
            Some(ch) => ch.solve(&g).iter().copied().collect(),
            None => grad.iter().map(|v| v * k as f64).collect(),
        };
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();

        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let trial: Vec<f64> = log_alpha.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            let (v, lb, qt) = semi_dual(log_kernel, poly, &trial);
            // near the optimum the dual is flat to rounding, so a full step
            // that shrinks the marginal error is accepted as well
            let shrinks = t == 1.0 && {
                let rt = qt.row_sums();
                poly.row.iter().zip(&rt).fold(0.0_f64, |m, (w, r)| m.max((w - r).abs())) < err
            };
            if v >= value + 1e-4 * t * slope || shrinks {
                log_alpha.copy_from_slice(&trial);
                (value, log_beta, q) = (v, lb, qt);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Polish {
                steps,
                converged: false,
                log_beta,
            };
        }
    }
}

/// Newton along `lambda / 2^j, ..., lambda / 2, lambda`, starting where
/// the dual is smooth and warm-starting each stage from the previous
/// one. Used when polishing from the scaling iterate stalls.
fn newton_homotopy(
    log_p: &Matrix,
    lambda: f64,
    poly: &TransportPolytope,
    log_alpha: &mut [f64],
    tol: f64,
    max_steps: usize,
) -> Polish {
    let mut stages = vec![lambda];
    while *stages.last().unwrap() > 0.5 {
        stages.push(stages.last().unwrap() / 2.0);
    }
    let mut steps = 0;
    let mut prev: Option<f64> = None;
    let mut last = None;
    for &lam in stages.iter().rev() {
        if let Some(p) = prev {
            for a in log_alpha.iter_mut() {
                *a *= lam / p;
            }
        }
        prev = Some(lam);
        let stage = newton_polish(&log_p.scale(lam), poly, log_alpha, tol, max_steps);
        steps += stage.steps;
        if !stage.converged {
            return Polish {
                steps,
                converged: false,
                log_beta: stage.log_beta,
            };
        }
        last = Some(stage);
    }
    let last = last.expect("at least one stage");
    Polish { steps, ..last }
}

/// Budget for polishing from the scaling iterate before falling back to
/// the homotopy.
const WARM_POLISH_STEPS: usize = 25;

/// Log-potentials may drift this far from the reference before the kernel
/// is re-exponentiated.
const DRIFT: f64 = 30.0;

/// Scaled sums below this are recomputed exactly: kernel entries lost to
/// underflow are at most `5e-324 * exp(2 * DRIFT)`, negligible against it.
const SUM_FLOOR: f64 = 1e-200;

/// `exp(log K + a0 + b0)` for reference potentials `a0`, `b0`, plus the
/// current potentials as multiplicative scalings `u = exp(a - a0)`,
/// `v = exp(b - b0)`. A half-step then costs one matrix-vector product
/// instead of `K*N` exponentials. Sums that underflow fall back to an
/// exact log-sum-exp.
struct StabilizedKernel {
    kernel: Matrix,
    ref_alpha: Vec<f64>,
    ref_beta: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    drift: f64,
}

impl StabilizedKernel {
    fn new(log_kernel: &Matrix, log_alpha: &[f64], log_beta: &[f64]) -> Self {
        let (k, n) = log_kernel.shape();
        let mut kernel = Matrix::zeros(k, n);
        for r in 0..k {
            for i in 0..n {
                kernel[(r, i)] = (log_kernel[(r, i)] + log_alpha[r] + log_beta[i]).exp();
            }
        }
        Self {
            kernel,
            ref_alpha: log_alpha.to_vec(),
            ref_beta: log_beta.to_vec(),
            u: vec![1.0; k],
            v: vec![1.0; n],
            drift: 0.0,
        }
    }

    fn set_row_scaling(&mut self, log_alpha: &[f64]) {
        for (r, (u, a)) in self.u.iter_mut().zip(log_alpha).enumerate() {
            let d = a - self.ref_alpha[r];
            self.drift = self.drift.max(d.abs());
            *u = d.exp();
        }
    }

    fn set_col_scaling(&mut self, log_beta: &[f64]) {
        for (i, (v, b)) in self.v.iter_mut().zip(log_beta).enumerate() {
            let d = b - self.ref_beta[i];
            self.drift = self.drift.max(d.abs());
            *v = d.exp();
        }
    }

    fn drifted(&self) -> bool {
        self.drift > DRIFT
    }

    /// `out[r] = LSE_i(log K[r,i] + log_beta[i])`.
    fn row_lse(&self, log_kernel: &Matrix, log_beta: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let s = dot(self.kernel.row(r), &self.v);
            *o = if s >= SUM_FLOOR && s.is_finite() {
                s.ln() - self.ref_alpha[r]
            } else {
                log_sum_exp(log_kernel.row(r).iter().zip(log_beta).map(|(a, b)| a + b))
            };
        }
    }

    /// `out[i] = LSE_r(log K[r,i] + log_alpha[r])`.
    fn col_lse(&self, log_kernel: &Matrix, log_alpha: &[f64], out: &mut [f64]) {
        let (k, n) = self.kernel.shape();
        out.fill(0.0);
        for r in 0..k {
            let u = self.u[r];
            for (o, kv) in out.iter_mut().zip(self.kernel.row(r)) {
                *o += kv * u;
            }
        }
        for i in 0..n {
            let s = out[i];
            out[i] = if s >= SUM_FLOOR && s.is_finite() {
                s.ln() - self.ref_beta[i]
            } else {
                log_sum_exp((0..k).map(|r| log_kernel[(r, i)] + log_alpha[r]))
            };
        }
    }
}

/// L-infinity distance between the marginals of `q` and the polytope's.
pub fn marginal_error(q: &Matrix, poly: &TransportPolytope) -> f64 {
    let rows = q
        .row_sums()
        .iter()
        .zip(&poly.row)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let cols = q
        .col_sums()
        .iter()
        .zip(&poly.col)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    rows.max(cols)
}

/// `sum_q q ln q` with `0 ln 0 = 0`, i.e. negative entropy.
fn neg_entropy(q: &Matrix) -> f64 {
    q.as_slice().iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

/// Shannon entropy `-sum q ln q`.
pub fn entropy(q: &Matrix) -> f64 {
    -neg_entropy(q)
}

/// Entropic transport cost `<Q, -log P> - H(Q)/lambda`, the quantity the
/// Sinkhorn fixed point minimizes over the polytope.
pub fn transport_objective(q: &Matrix, p: &Matrix, lambda: f64) -> f64 {
    let cost: f64 = q
        .as_slice()
        .iter()
        .zip(p.as_slice())
        .map(|(&qv, &pv)| -qv * pv.max(PROB_FLOOR).ln())
        .sum();
    cost + neg_entropy(q) / lambda
}

/// Column-wise `log softmax(C f_i / tau) - log N`, i.e. `log P` for
/// prototypes `C` (`K x D`) and features `F` (`N x D`).
pub fn log_joint_probs(features: &Matrix, prototypes: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let logits = matmul_nt(prototypes, features)?; // K x N
    let (k, n) = logits.shape();
    let log_n = (n as f64).ln();
    let mut out = Matrix::zeros(k, n);
    for i in 0..n {
        let lse = log_sum_exp((0..k).map(|r| logits[(r, i)] / tau));
        for r in 0..k {
            out[(r, i)] = logits[(r, i)] / tau - lse - log_n;
        }
    }
    Ok(out)
}

/// Builds `P` from prototype similarities and runs Sinkhorn on it.
pub fn refine(
    features: &Matrix,
    prototypes: &Matrix,
    tau: f64,
    poly: &TransportPolytope,
    cfg: &SinkhornConfig,
) -> Result<SinkhornOutput> {
    let log_p = log_joint_probs(features, prototypes, tau)?;
    sinkhorn_log(&log_p, poly, cfg)
}

/// Column-wise argmax; ties go to the lowest row.
pub fn harden(q: &Matrix) -> Vec<usize> {
    (0..q.cols())
        .map(|i| {
            let mut best = 0;
            for r in 1..q.rows() {
                if q[(r, i)] > q[(best, i)] {
                    best = r;
                }
            }
            best
        })
        .collect()
}
