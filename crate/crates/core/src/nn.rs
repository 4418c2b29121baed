//! Small fully connected tanh networks with exact reverse-mode gradients and Adam.
//!
//! Parameters live in one flat vector: for each layer, a row-major
//! `out × in` weight block followed by the `out` biases. Gradients and Adam
//! moments share that layout.

use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Layer widths from input to output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub sizes: Vec<usize>,
}

impl Architecture {
    /// Policy head: `J → 10J → 10√(LJ) → 10L → outputs`.
    pub fn policy(classes: usize, stations: usize, outputs: usize) -> Self {
        let mid = (10.0 * ((stations * classes) as f64).sqrt()).round() as usize;
        Self { sizes: vec![classes, 10 * classes, mid, 10 * stations, outputs] }
    }

    /// Value head: `J → 10J → 10√J → 10 → 1`.
    pub fn value(classes: usize) -> Self {
        let mid = (10.0 * (classes as f64).sqrt()).round() as usize;
        Self { sizes: vec![classes, 10 * classes, mid, 10, 1] }
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Multilayer perceptron with tanh hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    /// Multiplier applied to raw inputs before the first layer.
    pub input_scale: f64,
    /// Multiplier applied to the linear output layer.
    #[serde(default = "one")]
    pub output_scale: f64,
}

fn one() -> f64 {
    1.0
}

/// Per-thread activation buffers.
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl Mlp {
    pub fn zeros(arch: &Architecture) -> Self {
        Self { sizes: arch.sizes.clone(), params: vec![0.0; arch.num_params()], input_scale: 1.0, output_scale: 1.0 }
    }

    /// Glorot-uniform weights on ±√(6/(fan_in+fan_out)), zero biases.
    pub fn xavier(arch: &Architecture, rng: &mut Rng) -> Self {
        let mut net = Self::zeros(arch);
        for k in 0..net.num_layers() {
            let (fan_in, fan_out) = (net.sizes[k], net.sizes[k + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let off = net.weight_offset(k);
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = rng.gen_range(-a..a);
            }
        }
        net
    }

    /// Builds a network from explicit layers `(weights row-major, biases)`.
    pub fn from_layers(sizes: Vec<usize>, layers: &[(Vec<f64>, Vec<f64>)], input_scale: f64) -> Result<Self> {
        if layers.len() + 1 != sizes.len() {
            return Err(Error::InsufficientData("layer count does not match sizes".into()));
        }
        let mut params = Vec::new();
        for (k, (w, b)) in layers.iter().enumerate() {
            if w.len() != sizes[k] * sizes[k + 1] || b.len() != sizes[k + 1] {
                return Err(Error::InsufficientData(format!("layer {k} has the wrong shape")));
            }
            params.extend_from_slice(w);
            params.extend_from_slice(b);
        }
        Ok(Self { sizes, params, input_scale, output_scale: 1.0 })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { sizes: self.sizes.clone() }
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weight_offset(&self, layer: usize) -> usize {
        self.sizes.windows(2).take(layer).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let off = self.weight_offset(layer);
        &self.params[off..off + self.sizes[layer] * self.sizes[layer + 1]]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let off = self.weight_offset(layer) + self.sizes[layer] * self.sizes[layer + 1];
        &self.params[off..off + self.sizes[layer + 1]]
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteParameter)
        }
    }

    /// Forward pass; the output is left in the workspace and returned.
    pub fn forward_ws<'w>(&self, input: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        let n = self.num_layers();
        if ws.acts.len() != n + 1 {
            ws.acts = self.sizes.iter().map(|&s| vec![0.0; s]).collect();
        }
        for (a, &x) in ws.acts[0].iter_mut().zip(input) {
            *a = self.input_scale * x;
        }
        let mut off = 0;
        for k in 0..n {
            let (fan_in, fan_out) = (self.sizes[k], self.sizes[k + 1]);
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let (prev, rest) = ws.acts.split_at_mut(k + 1);
            let src = &prev[k];
            let dst = &mut rest[0];
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let z = b[o] + row.iter().zip(src).map(|(w, a)| w * a).sum::<f64>();
                dst[o] = if k + 1 < n { z.tanh() } else { self.output_scale * z };
            }
        }
        &ws.acts[n]
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut ws = Workspace::default();
        self.forward_ws(input, &mut ws).to_vec()
    }

    /// Forward pass on a jobcount vector.
    pub fn forward_state<'w>(&self, x: &[u32], ws: &'w mut Workspace) -> &'w [f64] {
        let input: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        self.forward_ws(&input, ws)
    }

    /// Adds `∂(dout·output)/∂params` to `grad`, using the activations of the
    /// last `forward_ws` call on `ws`.
    pub fn backward_ws(&self, ws: &mut Workspace, dout: &[f64], grad: &mut [f64]) {
        let n = self.num_layers();
        ws.delta.clear();
        ws.delta.extend(dout.iter().map(|d| d * self.output_scale));
        for k in (0..n).rev() {
            let (fan_in, fan_out) = (self.sizes[k], self.sizes[k + 1]);
            let off = self.weight_offset(k);
            let a_prev = &ws.acts[k];
            for o in 0..fan_out {
                let d = ws.delta[o];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, a) in g.iter_mut().zip(a_prev) {
                    *g += d * a;
                }
                grad[off + fan_in * fan_out + o] += d;
            }
            if k == 0 {
                break;
            }
            let w = &self.params[off..off + fan_in * fan_out];
            ws.next_delta.clear();
            ws.next_delta.resize(fan_in, 0.0);
            for o in 0..fan_out {
                let d = ws.delta[o];
                if d == 0.0 {
                    continue;
                }
                for (nd, w) in ws.next_delta.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *nd += w * d;
                }
            }
            for (nd, a) in ws.next_delta.iter_mut().zip(a_prev) {
                *nd *= 1.0 - a * a;
            }
            std::mem::swap(&mut ws.delta, &mut ws.next_delta);
        }
    }

    /// Sums per-sample losses and parameter gradients over `n` samples.
    ///
    /// `input(i, buf)` fills sample `i`'s raw input; `loss(i, output, dout)`
    /// returns its loss and writes `∂loss/∂output`. Samples are processed in
    /// fixed chunks whose partial sums are combined in order, so the result
    /// does not depend on the number of threads.
    pub fn batch_gradient<I, L>(&self, n: usize, input: I, loss: L) -> (f64, Vec<f64>)
    where
        I: Fn(usize, &mut Vec<f64>) + Sync + Send,
        L: Fn(usize, &[f64], &mut [f64]) -> f64 + Sync + Send,
    {
        const CHUNK: usize = 64;
        let p = self.params.len();
        let parts = par::map_range(n.div_ceil(CHUNK), |c| {
            let mut ws = Workspace::default();
            let mut grad = vec![0.0; p];
            let mut buf = Vec::with_capacity(self.num_inputs());
            let mut dout = vec![0.0; self.num_outputs()];
            let mut total = 0.0;
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                buf.clear();
                input(i, &mut buf);
                let out = self.forward_ws(&buf, &mut ws);
                dout.iter_mut().for_each(|d| *d = 0.0);
                total += loss(i, out, &mut dout);
                self.backward_ws(&mut ws, &dout, &mut grad);
            }
            (total, grad)
        });
        let mut grad = vec![0.0; p];
        let mut total = 0.0;
        for (l, g) in parts {
            total += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        (total, grad)
    }
}

/// Adam moments with bias correction; the state persists across epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self { m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update `θ ← θ − lr·Ĝ/(√Ĥ + ϱ)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
