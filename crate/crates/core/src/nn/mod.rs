//! Small dense-network toolkit with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat `Vec<f64>`; layers only hold offsets into it,
//! which keeps optimizer state, checkpoints and finite-difference probes
//! trivially aligned with the network.

pub mod attention;
pub mod denoiser;
pub mod embed;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{normal, RandomStream};

/// How a tensor is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Gaussian with standard deviation `1 / sqrt(fan_in)`.
    FanIn,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub init: Init,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named sub-tensors of the flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let offset = self.total;
        self.tensors.push(TensorInfo {
            name,
            rows,
            cols,
            offset,
            init,
        });
        self.total += rows * cols;
        offset
    }

    /// Registers a dense layer `input -> output` under `name.weight` / `name.bias`.
    pub fn linear(&mut self, name: &str, input: usize, output: usize, init: Init) -> Linear {
        let w = self.push(format!("{name}.weight"), output, input, init);
        let b = self.push(format!("{name}.bias"), output, 1, Init::Zero);
        Linear {
            w,
            b,
            input,
            output,
        }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    /// Fresh parameters: fan-in Gaussian weights, zero biases.
    pub fn init(&self, stream: RandomStream) -> Vec<f64> {
        let mut rng: ChaCha8Rng = stream.rng();
        let mut p = vec![0.0; self.total];
        for t in &self.tensors {
            if t.init == Init::FanIn {
                let std = 1.0 / (t.cols as f64).sqrt();
                for v in &mut p[t.offset..t.offset + t.len()] {
                    *v = std * normal(&mut rng);
                }
            }
        }
        p
    }
}

/// Dense affine map; the weight is stored row-major as `[output][input]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    w: usize,
    b: usize,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input);
        let w = &p[self.w..self.w + self.input * self.output];
        let b = &p[self.b..self.b + self.output];
        w.chunks_exact(self.input)
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and, when requested, the
    /// input gradient into `dx`.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        let n = self.input;
        {
            let gw = &mut grad[self.w..self.w + n * self.output];
            for (row, &d) in gw.chunks_exact_mut(n).zip(dy) {
                if d != 0.0 {
                    for (g, v) in row.iter_mut().zip(x) {
                        *g += d * v;
                    }
                }
            }
        }
        for (g, d) in grad[self.b..self.b + self.output].iter_mut().zip(dy) {
            *g += d;
        }
        if let Some(dx) = dx {
            let w = &p[self.w..self.w + n * self.output];
            for (row, &d) in w.chunks_exact(n).zip(dy) {
                if d != 0.0 {
                    for (g, a) in dx.iter_mut().zip(row) {
                        *g += d * a;
                    }
                }
            }
        }
    }

    /// Sets the weight to the identity (square layers only) and zeroes the bias.
    pub fn set_identity(&self, p: &mut [f64]) {
        assert_eq!(self.input, self.output);
        for i in 0..self.output {
            for j in 0..self.input {
                p[self.w + i * self.input + j] = if i == j { 1.0 } else { 0.0 };
            }
            p[self.b + i] = 0.0;
        }
    }

    pub fn weight<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.input * self.output]
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.output]
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let th = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Stack of dense layers with GELU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Whether the last layer's output also passes through GELU.
    pub activate_last: bool,
}

#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    /// Input of each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// Registers layers of widths `widths[0] -> widths[1] -> ...`.
    pub fn build(layout: &mut ParamLayout, name: &str, widths: &[usize], activate_last: bool, zero_last: bool) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if zero_last && i + 1 == n { Init::Zero } else { Init::FanIn };
                layout.linear(&format!("{name}.{i}"), widths[i], widths[i + 1], init)
            })
            .collect();
        Self {
            layers,
            activate_last,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    fn activated(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.activate_last
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, &h);
            if self.activated(i) {
                h.iter_mut().for_each(|v| *v = gelu(*v));
            }
        }
        h
    }

    pub fn forward_cached(&self, p: &[f64], x: &[f64]) -> MlpCache {
        let mut cache = MlpCache::default();
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(p, &h);
            let out = if self.activated(i) {
                z.iter().map(|&v| gelu(v)).collect()
            } else {
                z.clone()
            };
            cache.inputs.push(h);
            cache.pre.push(z);
            h = out;
        }
        cache.output = h;
        cache
    }

    pub fn backward(&self, p: &[f64], cache: &MlpCache, dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        let mut d = dy.to_vec();
        let mut dx = dx;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if self.activated(i) {
                for (g, &z) in d.iter_mut().zip(&cache.pre[i]) {
                    *g *= gelu_grad(z);
                }
            }
            if i == 0 {
                layer.backward(p, &cache.inputs[0], &d, grad, dx.take());
            } else {
                let mut below = vec![0.0; layer.input];
                layer.backward(p, &cache.inputs[i], &d, grad, Some(&mut below));
                d = below;
            }
        }
    }
}
