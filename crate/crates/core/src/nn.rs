//! Minimal trainable velocity model: an MLP over `(x_t, condition, t)` with
//! manual reverse-mode gradients, an adaptive-moment optimizer, and EMA
//! weight blending.
//!
//! Parameters live in one flat `Vec<f64>` (layer weights row-major, then
//! biases, layer by layer), which keeps the optimizer, EMA updates, and
//! checkpoint serialization trivial and bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smooth activation for the hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

impl Activation {
    #[inline]
    fn forward(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Architecture descriptor: data dimension, condition vocabulary, hidden
/// widths, activation.
///
/// The input featurization is `[x_t | one-hot(cond) | t, 1-t, sin 2πt,
/// cos 2πt]`; the output is a velocity of the data dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub dim: usize,
    pub cond_vocab: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(dim: usize, cond_vocab: usize, hidden: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParam("data dimension must be > 0".into()));
        }
        if cond_vocab == 0 || cond_vocab > 16 {
            return Err(Error::InvalidParam(format!(
                "condition vocabulary {cond_vocab} outside 1..=16"
            )));
        }
        if hidden.contains(&0) {
            return Err(Error::InvalidParam("hidden widths must be > 0".into()));
        }
        Ok(Self {
            dim,
            cond_vocab,
            hidden,
            activation: Activation::Tanh,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dim + self.cond_vocab + 4
    }

    /// `(in, out)` per layer, hidden layers then the linear output layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.dim));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum()
    }
}

/// Trainable velocity field `v(x_t, cond, t)`.
#[derive(Debug, Clone)]
pub struct VelocityModel {
    arch: Architecture,
    params: Vec<f64>,
}

/// Activations cached by [`VelocityModel::forward_cached`] for the backward
/// pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    /// Post-activation output of each hidden layer.
    hidden: Vec<Vec<f64>>,
}

impl VelocityModel {
    /// Initialize with Xavier-uniform hidden layers and a zero output layer,
    /// so the initial field is identically zero.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = crate::rng::substream(seed, &[0x1a17]);
        let dims = arch.layer_dims();
        let n_layers = dims.len();
        let mut params = Vec::with_capacity(arch.num_params());
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let last = li == n_layers - 1;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(if last {
                    0.0
                } else {
                    rng.random_range(-bound..bound)
                });
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self { arch, params }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.num_params() {
            return Err(Error::DimensionMismatch {
                expected: arch.num_params(),
                got: params.len(),
            });
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Build the feature vector for `(x_t, cond, t)`.
    pub fn featurize(&self, x_t: &[f64], cond: usize, t: f64) -> Result<Vec<f64>> {
        if x_t.len() != self.arch.dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.dim,
                got: x_t.len(),
            });
        }
        if cond >= self.arch.cond_vocab {
            return Err(Error::InvalidParam(format!(
                "condition {cond} outside vocabulary of {}",
                self.arch.cond_vocab
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidParam(format!("t = {t} outside [0, 1]")));
        }
        let mut input = Vec::with_capacity(self.arch.input_dim());
        input.extend_from_slice(x_t);
        for c in 0..self.arch.cond_vocab {
            input.push(if c == cond { 1.0 } else { 0.0 });
        }
        let w = 2.0 * std::f64::consts::PI * t;
        input.extend_from_slice(&[t, 1.0 - t, w.sin(), w.cos()]);
        Ok(input)
    }

    /// Forward pass; output is checked finite (non-finite weights surface as
    /// a corrupted-model error).
    pub fn forward(&self, x_t: &[f64], cond: usize, t: f64) -> Result<Vec<f64>> {
        let (out, _) = self.forward_cached(x_t, cond, t)?;
        Ok(out)
    }

    /// Forward pass that also returns the activation cache needed by
    /// [`VelocityModel::backward`].
    pub fn forward_cached(
        &self,
        x_t: &[f64],
        cond: usize,
        t: f64,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let input = self.featurize(x_t, cond, t)?;
        let dims = self.arch.layer_dims();
        let n_layers = dims.len();
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(n_layers - 1);
        let mut cur = input.clone();
        let mut offset = 0usize;
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut next = vec![0.0; fan_out];
            for (o, next_o) in next.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut z = b[o];
                for (wi, xi) in row.iter().zip(&cur) {
                    z += wi * xi;
                }
                *next_o = if li == n_layers - 1 {
                    z
                } else {
                    self.arch.activation.forward(z)
                };
            }
            if li < n_layers - 1 {
                hidden.push(next.clone());
            }
            cur = next;
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptedModel);
        }
        Ok((cur, ForwardCache { input, hidden }))
    }

    /// Reverse-mode pass: accumulates `dL/dparams` into `grads` (flat, same
    /// layout as `params`) given `dL/doutput`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grads: &mut [f64]) {
        let dims = self.arch.layer_dims();
        let n_layers = dims.len();
        assert_eq!(d_out.len(), self.arch.dim, "upstream gradient dimension");
        assert_eq!(grads.len(), self.params.len(), "gradient buffer length");

        // Offsets of each layer's block in the flat parameter vector.
        let mut offsets = Vec::with_capacity(n_layers);
        let mut acc = 0usize;
        for &(fan_in, fan_out) in &dims {
            offsets.push(acc);
            acc += fan_in * fan_out + fan_out;
        }

        let mut d_cur = d_out.to_vec();
        for li in (0..n_layers).rev() {
            let (fan_in, fan_out) = dims[li];
            let off = offsets[li];
            let layer_in: &[f64] = if li == 0 { &cache.input } else { &cache.hidden[li - 1] };

            // Hidden layers: fold the activation derivative into d_cur.
            if li < n_layers - 1 {
                let y = &cache.hidden[li];
                for (d, &yo) in d_cur.iter_mut().zip(y) {
                    *d *= self.arch.activation.grad_from_output(yo);
                }
            }

            let (w_grad, b_grad) = grads[off..off + fan_in * fan_out + fan_out]
                .split_at_mut(fan_in * fan_out);
            for o in 0..fan_out {
                let g = d_cur[o];
                b_grad[o] += g;
                let row = &mut w_grad[o * fan_in..(o + 1) * fan_in];
                for (wg, xi) in row.iter_mut().zip(layer_in) {
                    *wg += g * xi;
                }
            }

            if li > 0 {
                let w = &self.params[off..off + fan_in * fan_out];
                let mut d_prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let g = d_cur[o];
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    for (dp, wi) in d_prev.iter_mut().zip(row) {
                        *dp += g * wi;
                    }
                }
                d_cur = d_prev;
            }
        }
    }
}

/// EMA blend `old <- eta * old + (1 - eta) * new`, elementwise.
pub fn ema_update(old: &mut [f64], new: &[f64], eta: f64) -> Result<()> {
    if old.len() != new.len() {
        return Err(Error::DimensionMismatch {
            expected: old.len(),
            got: new.len(),
        });
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidParam(format!("eta = {eta} outside [0, 1]")));
    }
    for (o, &n) in old.iter_mut().zip(new) {
        *o = eta * *o + (1.0 - eta) * n;
    }
    Ok(())
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of `params` from `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
