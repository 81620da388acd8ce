use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::nn::{gelu, gelu_backward, layer_rng, Dense, LayerNorm};
use super::{ArchitectureKind, AttentionPass, LayerId, PredictionVector, SiteKind, VisionModel};
use crate::error::{DixError, Result};
use crate::tensor::Tensor;

const INIT_SALT: u64 = 0;
const RANDOMIZE_SALT: u64 = 1;

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitBlock {
    pub ln1: LayerNorm,
    pub qkv: Dense,
    pub proj: Dense,
    pub ln2: LayerNorm,
    pub fc1: Dense,
    pub fc2: Dense,
}

/// Toy vision transformer: patch embedding, CLS token, learned positions,
/// pre-norm encoder blocks, classification from the CLS token.
///
/// Hookable sites: 0 = input image, `b` = post-softmax attention of block `b`
/// (1-based), shaped `(heads, tokens, tokens)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TinyVit {
    pub input_shape: [usize; 3],
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_embed: Dense,
    pub cls: Vec<f64>,
    pub pos: Vec<f64>,
    pub blocks: Vec<VitBlock>,
    pub norm: LayerNorm,
    pub head: Dense,
    /// Input of the most recent capture; attention substitutions replay it.
    #[serde(skip)]
    context: Option<Tensor>,
}

pub struct VitSpec {
    pub input_shape: [usize; 3],
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp: usize,
    pub blocks: usize,
    pub classes: usize,
}

struct BlockTrace {
    x_in: Tensor,
    qkv: Tensor,
    attn: Tensor,
    substituted: bool,
    x_mid: Tensor,
    f1: Tensor,
}

struct Trace {
    blocks: Vec<BlockTrace>,
    x_final: Tensor,
    logits: Vec<f64>,
}

impl TinyVit {
    pub fn new(spec: &VitSpec, seed: u64) -> Result<Self> {
        let [c, h, w] = spec.input_shape;
        if h % spec.patch != 0 || w % spec.patch != 0 || h != w {
            return Err(DixError::config("image must be square and divisible by the patch size"));
        }
        if !spec.dim.is_multiple_of(spec.heads) {
            return Err(DixError::config("dim must be divisible by heads"));
        }
        let patch_len = c * spec.patch * spec.patch;
        let tokens = (h / spec.patch) * (w / spec.patch) + 1;
        let mut rng = layer_rng(0, 0, 0);
        let d = spec.dim;
        let mut vit = TinyVit {
            input_shape: spec.input_shape,
            patch: spec.patch,
            dim: d,
            heads: spec.heads,
            patch_embed: Dense::init(patch_len, d, 1.0, &mut rng),
            cls: vec![0.0; d],
            pos: vec![0.0; tokens * d],
            blocks: (0..spec.blocks)
                .map(|_| VitBlock {
                    ln1: LayerNorm::new(d),
                    qkv: Dense::init(d, 3 * d, 1.0, &mut rng),
                    proj: Dense::init(d, d, 1.0, &mut rng),
                    ln2: LayerNorm::new(d),
                    fc1: Dense::init(d, spec.mlp, 1.0, &mut rng),
                    fc2: Dense::init(spec.mlp, d, 1.0, &mut rng),
                })
                .collect(),
            norm: LayerNorm::new(d),
            head: Dense::init(d, spec.classes, 1.0, &mut rng),
            context: None,
        };
        for g in 0..vit.blocks.len() + 2 {
            vit.init_group(g, seed, INIT_SALT);
        }
        Ok(vit)
    }

    fn init_group(&mut self, group: usize, seed: u64, salt: u64) {
        let mut rng = layer_rng(seed, group, salt);
        let d = self.dim;
        let nb = self.blocks.len();
        if group == 0 {
            self.patch_embed = Dense::init(self.patch_embed.inp, d, 1.0, &mut rng);
            let dist = Normal::new(0.0, 0.5).expect("finite std");
            self.cls.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            self.pos.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        } else if group <= nb {
            let b = &mut self.blocks[group - 1];
            let mlp = b.fc1.out;
            b.ln1 = LayerNorm::new(d);
            b.qkv = Dense::init(d, 3 * d, 1.5, &mut rng);
            b.proj = Dense::init(d, d, 0.7, &mut rng);
            b.ln2 = LayerNorm::new(d);
            b.fc1 = Dense::init(d, mlp, 1.0, &mut rng);
            b.fc2 = Dense::init(mlp, d, 0.7, &mut rng);
        } else {
            self.norm = LayerNorm::new(d);
            self.head = Dense::init(d, self.head.out, 1.0, &mut rng);
        }
    }

    pub fn tokens(&self) -> usize {
        self.patch_count() + 1
    }

    pub fn patch_count(&self) -> usize {
        let g = self.input_shape[1] / self.patch;
        g * g
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn patches(&self, image: &Tensor) -> Vec<Vec<f64>> {
        let [c, h, w] = self.input_shape;
        let p = self.patch;
        let grid = w / p;
        let data = image.data();
        (0..self.patch_count())
            .map(|pi| {
                let (py, px) = (pi / grid, pi % grid);
                let mut v = Vec::with_capacity(c * p * p);
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            v.push(data[ch * h * w + (py * p + dy) * w + px * p + dx]);
                        }
                    }
                }
                v
            })
            .collect()
    }

    fn embed(&self, image: &Tensor) -> Tensor {
        let d = self.dim;
        let t = self.tokens();
        let mut x = vec![0.0; t * d];
        x[..d].copy_from_slice(&self.cls);
        for (pi, patch) in self.patches(image).iter().enumerate() {
            let e = self.patch_embed.forward_vec(patch);
            x[(pi + 1) * d..(pi + 2) * d].copy_from_slice(&e);
        }
        for (xi, pi) in x.iter_mut().zip(&self.pos) {
            *xi += pi;
        }
        Tensor::new(vec![t, d], x).expect("embedding shape")
    }

    fn embed_backward(&self, image: &Tensor, dx: &Tensor) -> Tensor {
        let [c, h, w] = self.input_shape;
        let p = self.patch;
        let grid = w / p;
        let d = self.dim;
        let patches = self.patches(image);
        let mut dimg = vec![0.0; c * h * w];
        for (pi, patch) in patches.iter().enumerate() {
            let g = &dx.data()[(pi + 1) * d..(pi + 2) * d];
            let dp = self.patch_embed.backward_vec(patch, g, None);
            let (py, px) = (pi / grid, pi % grid);
            let mut k = 0;
            for ch in 0..c {
                for dy in 0..p {
                    for dxx in 0..p {
                        dimg[ch * h * w + (py * p + dy) * w + px * p + dxx] += dp[k];
                        k += 1;
                    }
                }
            }
        }
        Tensor::new(vec![c, h, w], dimg).expect("image grad shape")
    }

    fn run(&self, image: &Tensor, substitute: Option<(usize, &Tensor)>) -> Trace {
        let t = self.tokens();
        let d = self.dim;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = self.embed(image);
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (bi, b) in self.blocks.iter().enumerate() {
            let h1 = b.ln1.forward(&x);
            let qkv = b.qkv.forward_rows(&h1);
            let q_at = |i: usize, c: usize| qkv.data()[i * 3 * d + c];
            let (attn, substituted) = match substitute {
                Some((sb, a)) if sb == bi => (a.clone(), true),
                _ => {
                    let mut a = vec![0.0; self.heads * t * t];
                    for hd in 0..self.heads {
                        for i in 0..t {
                            let row = &mut a[(hd * t + i) * t..(hd * t + i + 1) * t];
                            for (j, r) in row.iter_mut().enumerate() {
                                *r = scale
                                    * (0..dh)
                                        .map(|c| q_at(i, hd * dh + c) * q_at(j, d + hd * dh + c))
                                        .sum::<f64>();
                            }
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let mut total = 0.0;
                            for r in row.iter_mut() {
                                *r = (*r - max).exp();
                                total += *r;
                            }
                            row.iter_mut().for_each(|r| *r /= total);
                        }
                    }
                    (Tensor::new(vec![self.heads, t, t], a).expect("attention shape"), false)
                }
            };
            let mut o = vec![0.0; t * d];
            for hd in 0..self.heads {
                for i in 0..t {
                    for j in 0..t {
                        let aij = attn.data()[(hd * t + i) * t + j];
                        for c in 0..dh {
                            o[i * d + hd * dh + c] += aij * q_at(j, 2 * d + hd * dh + c);
                        }
                    }
                }
            }
            let o = Tensor::new(vec![t, d], o).expect("attention output shape");
            let mut x_mid = b.proj.forward_rows(&o);
            x_mid.add_assign(&x);
            let h2 = b.ln2.forward(&x_mid);
            let f1 = b.fc1.forward_rows(&h2);
            let mut x_out = b.fc2.forward_rows(&gelu(&f1));
            x_out.add_assign(&x_mid);
            traces.push(BlockTrace {
                x_in: x,
                qkv,
                attn,
                substituted,
                x_mid,
                f1,
            });
            x = x_out;
        }
        let cls = Tensor::new(vec![1, d], x.data()[..d].to_vec()).expect("cls shape");
        let logits = self.head.forward_vec(self.norm.forward(&cls).data());
        Trace {
            blocks: traces,
            x_final: x,
            logits,
        }
    }

    /// Returns the image gradient and the gradient at every block's attention.
    fn backward(&self, image: &Tensor, trace: &Trace, dlogits: &[f64]) -> (Tensor, Vec<Tensor>) {
        let t = self.tokens();
        let d = self.dim;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let cls = Tensor::new(vec![1, d], trace.x_final.data()[..d].to_vec()).expect("cls shape");
        let normed = self.norm.forward(&cls);
        let dnormed = self.head.backward_vec(normed.data(), dlogits, None);
        let dcls = self
            .norm
            .backward(&cls, &Tensor::new(vec![1, d], dnormed).expect("cls grad"));
        let mut dx = Tensor::zeros(&[t, d]);
        dx.data_mut()[..d].copy_from_slice(dcls.data());

        let mut attn_grads = vec![Tensor::zeros(&[self.heads, t, t]); self.blocks.len()];
        for (bi, (b, bt)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            // MLP branch
            let dg = b.fc2.backward_rows(&dx);
            let df1 = gelu_backward(&bt.f1, &dg);
            let dh2 = b.fc1.backward_rows(&df1);
            let mut dx_mid = b.ln2.backward(&bt.x_mid, &dh2);
            dx_mid.add_assign(&dx);

            // attention branch
            let do_ = b.proj.backward_rows(&dx_mid);
            let qkv = bt.qkv.data();
            let at = |i: usize, c: usize| qkv[i * 3 * d + c];
            let mut dqkv = vec![0.0; t * 3 * d];
            let mut da = vec![0.0; self.heads * t * t];
            for hd in 0..self.heads {
                let a = &bt.attn.data()[hd * t * t..(hd + 1) * t * t];
                let da_h = &mut da[hd * t * t..(hd + 1) * t * t];
                for i in 0..t {
                    for j in 0..t {
                        let g: f64 = (0..dh)
                            .map(|c| do_.data()[i * d + hd * dh + c] * at(j, 2 * d + hd * dh + c))
                            .sum();
                        da_h[i * t + j] = g;
                        for c in 0..dh {
                            dqkv[j * 3 * d + 2 * d + hd * dh + c] += a[i * t + j] * do_.data()[i * d + hd * dh + c];
                        }
                    }
                }
                if !bt.substituted {
                    for i in 0..t {
                        let row_a = &a[i * t..(i + 1) * t];
                        let row_g = &da_h[i * t..(i + 1) * t];
                        let inner: f64 = row_a.iter().zip(row_g).map(|(x, y)| x * y).sum();
                        for j in 0..t {
                            let ds = row_a[j] * (row_g[j] - inner) * scale;
                            for c in 0..dh {
                                dqkv[i * 3 * d + hd * dh + c] += ds * at(j, d + hd * dh + c);
                                dqkv[j * 3 * d + d + hd * dh + c] += ds * at(i, hd * dh + c);
                            }
                        }
                    }
                }
            }
            attn_grads[bi] = Tensor::new(vec![self.heads, t, t], da).expect("attention grad shape");
            let dh1 = b
                .qkv
                .backward_rows(&Tensor::new(vec![t, 3 * d], dqkv).expect("qkv grad shape"));
            let mut dx_in = b.ln1.backward(&bt.x_in, &dh1);
            dx_in.add_assign(&dx_mid);
            dx = dx_in;
        }
        (self.embed_backward(image, &dx), attn_grads)
    }

    fn context(&self) -> Result<&Tensor> {
        self.context.as_ref().ok_or_else(|| {
            DixError::config("attention substitution needs a prior forward_capture to fix the input image")
        })
    }

    fn one_hot(&self, class: usize) -> Vec<f64> {
        let mut d = vec![0.0; self.head.out];
        d[class] = 1.0;
        d
    }
}

impl VisionModel for TinyVit {
    fn architecture(&self) -> ArchitectureKind {
        ArchitectureKind::Transformer
    }

    fn layer_ids(&self) -> Vec<LayerId> {
        std::iter::once(LayerId::INPUT)
            .chain((1..=self.blocks.len()).map(|i| LayerId::new(i, SiteKind::Attention)))
            .collect()
    }

    fn class_count(&self) -> usize {
        self.head.out
    }

    fn input_shape(&self) -> Vec<usize> {
        self.input_shape.to_vec()
    }

    fn site_shape(&self, layer: LayerId) -> Vec<usize> {
        if layer.index == 0 {
            self.input_shape.to_vec()
        } else {
            vec![self.heads, self.tokens(), self.tokens()]
        }
    }

    fn forward_capture(
        &mut self,
        input: &Tensor,
        layers: &[LayerId],
    ) -> Result<(PredictionVector, BTreeMap<LayerId, Tensor>)> {
        let trace = self.run(input, None);
        self.context = Some(input.clone());
        let mut captured = BTreeMap::new();
        for &l in layers {
            let t = if l.index == 0 {
                input.clone()
            } else {
                trace.blocks[l.index - 1].attn.clone()
            };
            captured.insert(l, t);
        }
        Ok((PredictionVector::new(trace.logits), captured))
    }

    fn forward_from(&mut self, layer: LayerId, representation: &Tensor) -> Result<PredictionVector> {
        if layer.index == 0 {
            return Ok(PredictionVector::new(self.run(representation, None).logits));
        }
        let image = self.context()?;
        Ok(PredictionVector::new(
            self.run(image, Some((layer.index - 1, representation))).logits,
        ))
    }

    fn grad_at(&mut self, layer: LayerId, representation: &Tensor, class_index: usize) -> Result<Tensor> {
        if layer.index == 0 {
            let trace = self.run(representation, None);
            return Ok(self.backward(representation, &trace, &self.one_hot(class_index)).0);
        }
        let pass = self.attention_pass(layer, representation, class_index)?;
        Ok(pass.gradients[layer.index - 1].clone())
    }

    fn attention_pass(
        &mut self,
        layer: LayerId,
        representation: &Tensor,
        class_index: usize,
    ) -> Result<AttentionPass> {
        let image = self.context()?.clone();
        let trace = self.run(&image, Some((layer.index - 1, representation)));
        let (_, gradients) = self.backward(&image, &trace, &self.one_hot(class_index));
        Ok(AttentionPass {
            prediction: PredictionVector::new(trace.logits.clone()),
            attentions: trace.blocks.into_iter().map(|b| b.attn).collect(),
            gradients,
        })
    }

    fn randomizable_layers(&self) -> Vec<String> {
        std::iter::once("embed".to_string())
            .chain((1..=self.blocks.len()).map(|i| format!("block{i}")))
            .chain(std::iter::once("head".to_string()))
            .collect()
    }

    fn randomize_layer(&mut self, index: usize, seed: u64) -> Result<()> {
        self.init_group(index, seed, RANDOMIZE_SALT);
        Ok(())
    }

    fn weight_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("vit serializes")
    }

    fn box_clone(&self) -> Box<dyn VisionModel> {
        Box::new(self.clone())
    }
}
