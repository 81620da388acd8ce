//! Layer primitives with explicit backward passes.
//!
//! Feature maps are `(channels, height, width)`; token streams are
//! `(tokens, features)`. Every layer here is smooth so that finite-difference
//! checks of the backward passes are well posed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Derives a per-layer RNG stream from a model seed, a layer index and a salt.
pub(crate) fn layer_rng(seed: u64, layer: usize, salt: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((layer as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(salt.wrapping_mul(0x94D0_49BB_1331_11EB));
    ChaCha8Rng::seed_from_u64(mixed)
}

fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    /// `(cout, cin, 3, 3)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    /// Normal(0, gain / sqrt(fan_in)) weights, zero bias.
    pub fn init(cin: usize, cout: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * 9) as f64;
        Conv3x3 {
            cin,
            cout,
            weight: normal_vec(rng, cout * cin * 9, gain / fan_in.sqrt()),
            bias: vec![0.0; cout],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (c, h, w) = chw(x);
        debug_assert_eq!(c, self.cin);
        let xd = x.data();
        let mut out = vec![0.0; self.cout * h * w];
        for o in 0..self.cout {
            let plane = &mut out[o * h * w..(o + 1) * h * w];
            plane.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.cin {
                let src = &xd[i * h * w..(i + 1) * h * w];
                let k = &self.weight[(o * self.cin + i) * 9..(o * self.cin + i + 1) * 9];
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += k[ky * 3 + kx] * src[sy as usize * w + sx as usize];
                            }
                        }
                        plane[y * w + xx] += acc;
                    }
                }
            }
        }
        Tensor::new(vec![self.cout, h, w], out).expect("conv output shape")
    }

    /// Returns the input gradient; accumulates parameter gradients when `grads` is given.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: Option<&mut ConvGrad>) -> Tensor {
        let (_, h, w) = chw(x);
        let xd = x.data();
        let dyd = dy.data();
        let mut dx = vec![0.0; self.cin * h * w];
        let mut grads = grads;
        for o in 0..self.cout {
            let g = &dyd[o * h * w..(o + 1) * h * w];
            if let Some(gr) = grads.as_deref_mut() {
                gr.bias[o] += g.iter().sum::<f64>();
            }
            for i in 0..self.cin {
                let kidx = (o * self.cin + i) * 9;
                let k = &self.weight[kidx..kidx + 9];
                let src = &xd[i * h * w..(i + 1) * h * w];
                let dst = &mut dx[i * h * w..(i + 1) * h * w];
                let mut dk = [0.0; 9];
                for y in 0..h {
                    for xx in 0..w {
                        let gv = g[y * w + xx];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let si = sy as usize * w + sx as usize;
                                dst[si] += k[ky * 3 + kx] * gv;
                                dk[ky * 3 + kx] += src[si] * gv;
                            }
                        }
                    }
                }
                if let Some(gr) = grads.as_deref_mut() {
                    for (acc, d) in gr.weight[kidx..kidx + 9].iter_mut().zip(dk) {
                        *acc += d;
                    }
                }
            }
        }
        Tensor::new(vec![self.cin, h, w], dx).expect("conv grad shape")
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(c: &Conv3x3) -> Self {
        ConvGrad {
            weight: vec![0.0; c.weight.len()],
            bias: vec![0.0; c.bias.len()],
        }
    }
}

/// Fully connected layer `y = W x + b`, `W` stored `(out, in)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inp: usize,
    pub out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn init(inp: usize, out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Dense {
            inp,
            out,
            weight: normal_vec(rng, inp * out, gain / (inp as f64).sqrt()),
            bias: vec![0.0; out],
        }
    }

    pub fn forward_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        (0..self.out)
            .map(|o| {
                let row = &self.weight[o * self.inp..(o + 1) * self.inp];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn backward_vec(&self, x: &[f64], dy: &[f64], grads: Option<&mut DenseGrad>) -> Vec<f64> {
        let mut dx = vec![0.0; self.inp];
        for (o, &g) in dy.iter().enumerate() {
            let row = &self.weight[o * self.inp..(o + 1) * self.inp];
            for (d, w) in dx.iter_mut().zip(row) {
                *d += w * g;
            }
        }
        if let Some(gr) = grads {
            for (o, &g) in dy.iter().enumerate() {
                gr.bias[o] += g;
                let row = &mut gr.weight[o * self.inp..(o + 1) * self.inp];
                for (acc, v) in row.iter_mut().zip(x) {
                    *acc += v * g;
                }
            }
        }
        dx
    }

    /// Applies the layer to every row of a `(tokens, inp)` tensor.
    pub fn forward_rows(&self, x: &Tensor) -> Tensor {
        let rows = x.shape()[0];
        let mut out = Vec::with_capacity(rows * self.out);
        for r in 0..rows {
            out.extend(self.forward_vec(&x.data()[r * self.inp..(r + 1) * self.inp]));
        }
        Tensor::new(vec![rows, self.out], out).expect("dense rows shape")
    }

    pub fn backward_rows(&self, dy: &Tensor) -> Tensor {
        let rows = dy.shape()[0];
        let mut dx = Vec::with_capacity(rows * self.inp);
        for r in 0..rows {
            let g = &dy.data()[r * self.out..(r + 1) * self.out];
            let mut d = vec![0.0; self.inp];
            for (o, &gv) in g.iter().enumerate() {
                let row = &self.weight[o * self.inp..(o + 1) * self.inp];
                for (di, w) in d.iter_mut().zip(row) {
                    *di += w * gv;
                }
            }
            dx.extend(d);
        }
        Tensor::new(vec![rows, self.inp], dx).expect("dense rows grad shape")
    }
}

#[derive(Clone, Debug)]
pub struct DenseGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseGrad {
    pub fn zeros_like(d: &Dense) -> Self {
        DenseGrad {
            weight: vec![0.0; d.weight.len()],
            bias: vec![0.0; d.bias.len()],
        }
    }
}

/// Row-wise layer normalization over the feature axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub dim: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            dim,
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let rows = x.shape()[0];
        let d = self.dim;
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let (mean, inv) = moments(row);
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * self.gamma[j] + self.beta[j];
            }
        }
        Tensor::new(vec![rows, d], out).expect("layernorm shape")
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Tensor {
        let rows = x.shape()[0];
        let d = self.dim;
        let mut dx = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let g = &dy.data()[r * d..(r + 1) * d];
            let (mean, inv) = moments(row);
            let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
            let dxhat: Vec<f64> = g.iter().zip(&self.gamma).map(|(a, b)| a * b).collect();
            let m1 = dxhat.iter().sum::<f64>() / d as f64;
            let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for j in 0..d {
                dx[r * d + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
        Tensor::new(vec![rows, d], dx).expect("layernorm grad shape")
    }
}

fn moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

/// Multiplies `dy` by the SiLU derivative evaluated at the pre-activation `x`.
pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    x.zip_map(dy, |v, g| {
        let s = sigmoid(v);
        g * s * (1.0 + v * (1.0 - s))
    })
    .expect("silu grad shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    x.zip_map(dy, |v, g| {
        let u = GELU_C * (v + 0.044715 * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    })
    .expect("gelu grad shape")
}

/// 2x2 average pooling with stride 2 (odd trailing rows/columns are dropped).
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (c, h, w) = chw(x);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ch * h * w;
                let s = xd[base + 2 * y * w + 2 * xx]
                    + xd[base + 2 * y * w + 2 * xx + 1]
                    + xd[base + (2 * y + 1) * w + 2 * xx]
                    + xd[base + (2 * y + 1) * w + 2 * xx + 1];
                out[ch * oh * ow + y * ow + xx] = 0.25 * s;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).expect("pool shape")
}

pub fn avg_pool2_backward(input_shape: &[usize], dy: &Tensor) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let g = 0.25 * dy.data()[ch * oh * ow + y * ow + xx];
                let base = ch * h * w;
                dx[base + 2 * y * w + 2 * xx] += g;
                dx[base + 2 * y * w + 2 * xx + 1] += g;
                dx[base + (2 * y + 1) * w + 2 * xx] += g;
                dx[base + (2 * y + 1) * w + 2 * xx + 1] += g;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx).expect("pool grad shape")
}

pub fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let (c, h, w) = chw(x);
    let n = (h * w) as f64;
    (0..c)
        .map(|ch| x.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / n)
        .collect()
}

pub fn global_avg_pool_backward(input_shape: &[usize], dy: &[f64]) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let n = (h * w) as f64;
    Tensor::from_fn(&[c, h, w], |i| dy[i / (h * w)] / n)
}

pub(crate) fn chw(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    debug_assert_eq!(s.len(), 3, "expected (C, H, W), got {s:?}");
    (s[0], s[1], s[2])
}
