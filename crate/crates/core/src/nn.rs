//! Small multilayer perceptrons with hand-written reverse mode and Adam.
//!
//! Networks output raw logits; softmax/sigmoid heads are applied by callers,
//! which also supply the gradient with respect to the logits. Parameters are
//! one flat vector, each layer stored as its `out x in` weight matrix
//! (row-major) followed by its bias.

use crate::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation `x` and output `y`. ReLU uses the
    /// subgradient 0 at 0.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

/// Intermediate values recorded by [`Mlp::forward_tape`].
#[derive(Clone, Debug)]
pub struct Tape {
    /// Layer inputs: `inputs[0]` is the network input, `inputs[l]` the
    /// post-activation output of hidden layer `l - 1`.
    inputs: Vec<Vec<f64>>,
    /// Hidden pre-activations.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// Zero-initialized network.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output sizes");
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self {
            sizes: sizes.to_vec(),
            activation,
            params: vec![0.0; n],
        }
    }

    /// Orthogonal weights (gain `sqrt(2)` on hidden layers, `out_gain` on the
    /// output layer) and zero biases.
    pub fn orthogonal<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::zeros(sizes, activation);
        let n_layers = net.n_layers();
        for l in 0..n_layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let gain = if l + 1 == n_layers { out_gain } else { 2f64.sqrt() };
            let w = orthogonal_matrix(n_out, n_in, rng);
            let off = net.offset(l);
            for o in 0..n_out {
                for i in 0..n_in {
                    net.params[off + o * n_in + i] = gain * w[(o, i)];
                }
            }
        }
        net
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    /// Offset of layer `l`'s weight block in the flat parameter vector.
    pub fn offset(&self, l: usize) -> usize {
        self.sizes
            .windows(2)
            .take(l)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_tape(x)?.output)
    }

    pub fn forward_tape(&self, x: &[f64]) -> Result<Tape> {
        self.check_input(x)?;
        let n_layers = self.n_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut h = x.to_vec();
        let mut off = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_out * n_in];
            let b = &self.params[off + n_out * n_in..off + n_out * n_in + n_out];
            let mut z = b.to_vec();
            // Column-wise accumulation skips zero inputs, which makes one-hot
            // observations cheap.
            for (i, &xi) in h.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (o, zo) in z.iter_mut().enumerate() {
                    *zo += w[o * n_in + i] * xi;
                }
            }
            off += n_out * n_in + n_out;
            inputs.push(h);
            if l + 1 < n_layers {
                let y: Vec<f64> = z.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(z);
                h = y;
            } else {
                h = z;
            }
        }
        Ok(Tape {
            inputs,
            pre,
            output: h,
        })
    }

    /// Accumulates `d(upstream . output)/d(params)` into `grad` and returns
    /// the input gradient when `want_input` is set.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &[f64],
        grad: &mut [f64],
        want_input: bool,
    ) -> Result<Option<Vec<f64>>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape {
                context: "upstream gradient",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if grad.len() != self.n_params() {
            return Err(Error::Shape {
                context: "gradient buffer",
                expected: self.n_params(),
                got: grad.len(),
            });
        }
        let n_layers = self.n_layers();
        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let x = &tape.inputs[l];
            {
                let (gw, gb) = grad[off..off + n_out * n_in + n_out].split_at_mut(n_out * n_in);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let row = &mut gw[o * n_in..(o + 1) * n_in];
                    for (g, &xi) in row.iter_mut().zip(x) {
                        if xi != 0.0 {
                            *g += d * xi;
                        }
                    }
                }
            }
            if l == 0 && !want_input {
                return Ok(None);
            }
            let w = &self.params[off..off + n_out * n_in];
            let mut dx = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (dxi, &wi) in dx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *dxi += d * wi;
                }
            }
            if l == 0 {
                return Ok(Some(dx));
            }
            let z = &tape.pre[l - 1];
            for ((d, &zi), &yi) in dx.iter_mut().zip(z).zip(x) {
                *d *= self.activation.derivative(zi, yi);
            }
            delta = dx;
        }
        unreachable!("network has at least one layer")
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

fn orthogonal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let (big, small) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(big, small, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Softmax restricted to entries where `mask` is true; masked entries get 0.
pub fn masked_softmax(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    match mask {
        None => softmax(logits),
        Some(mask) => {
            let m = logits
                .iter()
                .zip(mask)
                .filter(|(_, &ok)| ok)
                .map(|(&z, _)| z)
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits
                .iter()
                .zip(mask)
                .map(|(&z, &ok)| if ok { (z - m).exp() } else { 0.0 })
                .collect();
            let total: f64 = e.iter().sum();
            e.into_iter().map(|x| x / total).collect()
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = crate::mdp::log_sum_exp(logits.iter().copied());
    logits.iter().map(|z| z - lse).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Global L2 norm over several gradient buffers.
pub fn global_norm(grads: &[&[f64]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamReport {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, eps: f64, max_grad_norm: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            max_grad_norm,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One update over parameter groups that share this optimizer. The groups
    /// are laid out back to back in the moment buffers. Gradients are clipped
    /// to `max_grad_norm` by their joint L2 norm first.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<AdamReport> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        if total != self.m.len() || params.len() != grads.len() {
            return Err(Error::Shape {
                context: "adam parameter groups",
                expected: self.m.len(),
                got: total,
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Shape {
                    context: "adam gradient group",
                    expected: p.len(),
                    got: g.len(),
                });
            }
        }
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm} at adam step {}", self.step)));
        }
        let scale = match self.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut i = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pj, &gj) in p.iter_mut().zip(g.iter()) {
                let gj = gj * scale;
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gj;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gj * gj;
                let mhat = self.m[i] / c1;
                let vhat = self.v[i] / c2;
                *pj -= self.lr * mhat / (vhat.sqrt() + self.eps);
                i += 1;
            }
        }
        Ok(AdamReport {
            grad_norm: norm,
            clipped: scale < 1.0,
        })
    }
}

/// Scales gradients in place so their joint norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}
