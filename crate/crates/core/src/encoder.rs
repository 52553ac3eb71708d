//! Small perceptron encoder with hand-written backprop.
//!
//! Layers are dense, tanh between them, linear on the last one, and the
//! output rows are L2-normalized. Parameters live in one flat buffer so
//! optimizers, checkpoints and finite-difference checks can treat them
//! uniformly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, ZERO_NORM};

/// Parameters of the dense stack `dims[0] -> dims[1] -> ... -> dims[last]`.
///
/// For layer `l` the buffer holds the `dims[l+1] x dims[l]` weight matrix
/// (row-major) followed by `dims[l+1]` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dims: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

impl LayerSpan {
    fn end(&self) -> usize {
        self.b + self.fan_out
    }
}

fn layer_spans(dims: &[usize]) -> Vec<LayerSpan> {
    let mut off = 0;
    dims.windows(2)
        .map(|w| {
            let span = LayerSpan {
                fan_in: w[0],
                fan_out: w[1],
                w: off,
                b: off + w[0] * w[1],
            };
            off = span.end();
            span
        })
        .collect()
}

impl EncoderParams {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "encoder dims must have at least two positive entries, got {dims:?}"
            )));
        }
        let n = layer_spans(dims).last().map_or(0, LayerSpan::end);
        Ok(Self {
            dims: dims.to_vec(),
            values: vec![0.0; n],
        })
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        for span in layer_spans(dims) {
            let limit = (6.0 / (span.fan_in + span.fan_out) as f64).sqrt();
            for v in &mut p.values[span.w..span.b] {
                *v = rng.random_range(-limit..limit);
            }
        }
        Ok(p)
    }

    pub fn from_values(dims: &[usize], values: Vec<f64>) -> Result<Self> {
        let p = Self::zeros(dims)?;
        if p.values.len() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {} parameters, got {}",
                p.values.len(),
                values.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            values,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    /// Sets layer `l`'s weights (`fan_out x fan_in`) and biases.
    pub fn set_layer(&mut self, l: usize, weights: &Matrix, bias: &[f64]) -> Result<()> {
        let span = *layer_spans(&self.dims)
            .get(l)
            .ok_or_else(|| Error::ShapeMismatch(format!("no layer {l}")))?;
        if weights.shape() != (span.fan_out, span.fan_in) || bias.len() != span.fan_out {
            return Err(Error::ShapeMismatch(format!(
                "layer {l} expects {}x{} weights",
                span.fan_out, span.fan_in
            )));
        }
        self.values[span.w..span.b].copy_from_slice(weights.as_slice());
        self.values[span.b..span.end()].copy_from_slice(bias);
        Ok(())
    }

    /// Plain gradient descent: `params - lr * grads`.
    pub fn sgd_step(&self, grads: &EncoderParams, lr: f64) -> EncoderParams {
        assert_eq!(self.dims, grads.dims, "gradient shape mismatch");
        let mut out = self.clone();
        for (p, g) in out.values.iter_mut().zip(&grads.values) {
            *p -= lr * g;
        }
        out
    }
}

/// Activations cached by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    params: EncoderParams,
    /// `acts[0]` is the input batch, `acts[l+1]` the output of layer `l`
    /// (post-tanh for hidden layers, pre-normalization for the last).
    acts: Vec<Matrix>,
    features: Matrix,
}

impl ForwardTape {
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn batch_size(&self) -> usize {
        self.features.rows()
    }

    /// Output of the last dense layer before normalization.
    pub fn pre_norm(&self) -> &Matrix {
        self.acts.last().unwrap()
    }
}

pub fn forward(params: &EncoderParams, inputs: &Matrix) -> Result<(Matrix, ForwardTape)> {
    if inputs.cols() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "encoder input dim {} but batch has {} columns",
            params.input_dim(),
            inputs.cols()
        )));
    }
    let spans = layer_spans(&params.dims);
    let last = spans.len() - 1;
    let mut acts = Vec::with_capacity(spans.len() + 1);
    acts.push(inputs.clone());
    for (l, span) in spans.iter().enumerate() {
        let prev = &acts[l];
        let w = &params.values[span.w..span.b];
        let b = &params.values[span.b..span.end()];
        let mut out = Matrix::zeros(prev.rows(), span.fan_out);
        for r in 0..prev.rows() {
            let x = prev.row(r);
            for (o, (wrow, bias)) in out.row_mut(r).iter_mut().zip(w.chunks_exact(span.fan_in).zip(b)) {
                let z = dot(wrow, x) + bias;
                *o = if l == last { z } else { z.tanh() };
            }
        }
        acts.push(out);
    }
    let features = crate::numerics::l2_normalize_rows(acts.last().unwrap())?;
    Ok((
        features.clone(),
        ForwardTape {
            params: params.clone(),
            acts,
            features,
        },
    ))
}

/// Encodes without keeping a tape.
pub fn encode(params: &EncoderParams, inputs: &Matrix) -> Result<Matrix> {
    forward(params, inputs).map(|(f, _)| f)
}

/// Pulls an upstream gradient on `y / |y|` back to `y`:
/// `(I - f f^T) g / |y|` with `f = y / |y|`.
pub fn normalize_backward(y: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
    let n = norm(y);
    if n < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    let proj = y.iter().zip(grad_out).map(|(a, b)| a * b).sum::<f64>() / n;
    Ok(y.iter()
        .zip(grad_out)
        .map(|(yi, gi)| (gi - proj * yi / n) / n)
        .collect())
}

/// Gradient of an upstream scalar loss w.r.t. every encoder parameter.
pub fn backward(tape: &ForwardTape, grad_features: &Matrix) -> Result<EncoderParams> {
    if grad_features.shape() != tape.features.shape() {
        return Err(Error::ShapeMismatch(format!(
            "feature grad {:?} vs features {:?}",
            grad_features.shape(),
            tape.features.shape()
        )));
    }
    let params = &tape.params;
    let spans = layer_spans(&params.dims);
    let mut grads = params.zeros_like();

    let y = tape.pre_norm();
    let mut delta = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let g = normalize_backward(y.row(r), grad_features.row(r))?;
        delta.row_mut(r).copy_from_slice(&g);
    }

    for (l, span) in spans.iter().enumerate().rev() {
        let input = &tape.acts[l];
        let (gw, gb) = grads.values[span.w..span.end()].split_at_mut(span.b - span.w);
        for r in 0..delta.rows() {
            let d = delta.row(r);
            let x = input.row(r);
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                gb[o] += dv;
                for (g, xv) in gw[o * span.fan_in..(o + 1) * span.fan_in].iter_mut().zip(x) {
                    *g += dv * xv;
                }
            }
        }
        if l == 0 {
            break;
        }
        // propagate into the previous (tanh) layer
        let w = &params.values[span.w..span.b];
        let mut prev = Matrix::zeros(delta.rows(), span.fan_in);
        for r in 0..delta.rows() {
            let d = delta.row(r);
            let h = input.row(r);
            let out = prev.row_mut(r);
            for (o, &dv) in d.iter().enumerate() {
                for (acc, wv) in out.iter_mut().zip(&w[o * span.fan_in..(o + 1) * span.fan_in]) {
                    *acc += dv * wv;
                }
            }
            for (acc, hv) in out.iter_mut().zip(h) {
                *acc *= 1.0 - hv * hv;
            }
        }
        delta = prev;
    }
    Ok(grads)
}

/// Adam moments for one flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_betas(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected Adam update applied in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer bound to one parameter buffer.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(len)),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam(state) => state.step(params, grads, lr),
        }
    }
}
