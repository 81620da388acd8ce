use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::nn::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, layer_rng, silu,
    silu_backward, Conv3x3, ConvGrad, Dense, DenseGrad,
};
use super::{ArchitectureKind, LayerId, PredictionVector, SiteKind, VisionModel};
use crate::error::{DixError, Result};
use crate::tensor::Tensor;

/// Salt separating initial weights from later re-randomizations.
const INIT_SALT: u64 = 0;
const RANDOMIZE_SALT: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPool {
    /// Global average pool to one value per channel.
    Global,
    /// 2x2 average pool, then flatten.
    Pool2Flatten,
}

/// Residual block: `silu(conv2(silu(conv1(x))) + x)`, optionally followed by 2x2 average pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResBlock {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub pool: bool,
}

/// A small residual CNN with SiLU activations.
///
/// Hookable sites: 0 = input image, `i` = output of residual block `i` (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub input_shape: [usize; 3],
    pub stem: Conv3x3,
    pub blocks: Vec<ResBlock>,
    pub head_pool: HeadPool,
    pub hidden: Option<Dense>,
    pub out: Dense,
}

#[derive(Clone, Debug)]
pub struct ConvNetGrads {
    pub stem: ConvGrad,
    pub blocks: Vec<(ConvGrad, ConvGrad)>,
    pub hidden: Option<DenseGrad>,
    pub out: DenseGrad,
}

impl ConvNetGrads {
    pub fn zeros_like(net: &ConvNet) -> Self {
        ConvNetGrads {
            stem: ConvGrad::zeros_like(&net.stem),
            blocks: net
                .blocks
                .iter()
                .map(|b| (ConvGrad::zeros_like(&b.conv1), ConvGrad::zeros_like(&b.conv2)))
                .collect(),
            hidden: net.hidden.as_ref().map(DenseGrad::zeros_like),
            out: DenseGrad::zeros_like(&net.out),
        }
    }

    /// Gradient buffers in the same order as [`ConvNet::params_mut`].
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.stem.weight, &self.stem.bias];
        for (a, b) in &self.blocks {
            v.extend([&a.weight[..], &a.bias[..], &b.weight[..], &b.bias[..]]);
        }
        if let Some(h) = &self.hidden {
            v.extend([&h.weight[..], &h.bias[..]]);
        }
        v.extend([&self.out.weight[..], &self.out.bias[..]]);
        v
    }
}

struct BlockTrace {
    input: Tensor,
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
}

struct Trace {
    start: usize,
    stem: Option<(Tensor, Tensor)>,
    blocks: Vec<BlockTrace>,
    block_outputs: Vec<Tensor>,
    last_map_shape: Vec<usize>,
    features: Vec<f64>,
    hidden_pre: Option<Vec<f64>>,
    head_in: Vec<f64>,
    logits: Vec<f64>,
}

pub struct ConvNetSpec {
    pub input_shape: [usize; 3],
    pub channels: usize,
    /// One entry per residual block: whether it ends with 2x2 pooling.
    pub pools: Vec<bool>,
    pub head_pool: HeadPool,
    pub hidden: Option<usize>,
    pub classes: usize,
}

impl ConvNet {
    pub fn new(spec: &ConvNetSpec, seed: u64) -> Self {
        let c = spec.channels;
        let mut net = ConvNet {
            input_shape: spec.input_shape,
            stem: Conv3x3::init(spec.input_shape[0], c, 1.0, &mut layer_rng(0, 0, 0)),
            blocks: spec
                .pools
                .iter()
                .map(|&pool| {
                    let mut rng = layer_rng(0, 0, 0);
                    ResBlock {
                        conv1: Conv3x3::init(c, c, 1.0, &mut rng),
                        conv2: Conv3x3::init(c, c, 1.0, &mut rng),
                        pool,
                    }
                })
                .collect(),
            head_pool: spec.head_pool,
            hidden: None,
            out: Dense::init(1, spec.classes, 1.0, &mut layer_rng(0, 0, 0)),
        };
        let feat = net.feature_len();
        net.hidden = spec.hidden.map(|h| Dense::init(feat, h, 1.0, &mut layer_rng(0, 0, 0)));
        let head_in = spec.hidden.unwrap_or(feat);
        net.out = Dense::init(head_in, spec.classes, 1.0, &mut layer_rng(0, 0, 0));
        for i in 0..net.randomizable_count() {
            net.init_group(i, seed, INIT_SALT);
        }
        net
    }

    fn randomizable_count(&self) -> usize {
        self.blocks.len() + 2
    }

    /// Redraws one parameter group: stem, each block, then the head.
    fn init_group(&mut self, group: usize, seed: u64, salt: u64) {
        let mut rng = layer_rng(seed, group, salt);
        let nb = self.blocks.len();
        if group == 0 {
            self.stem = Conv3x3::init(self.stem.cin, self.stem.cout, 1.5, &mut rng);
        } else if group <= nb {
            let b = &mut self.blocks[group - 1];
            let c = b.conv1.cin;
            b.conv1 = Conv3x3::init(c, c, 1.0, &mut rng);
            b.conv2 = Conv3x3::init(c, c, 0.5, &mut rng);
        } else {
            if let Some(h) = &mut self.hidden {
                *h = Dense::init(h.inp, h.out, 1.5, &mut rng);
            }
            self.out = Dense::init(self.out.inp, self.out.out, 1.0, &mut rng);
        }
    }

    pub fn classes(&self) -> usize {
        self.out.out
    }

    fn map_shape_after(&self, blocks_done: usize) -> Vec<usize> {
        let c = self.stem.cout;
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for b in &self.blocks[..blocks_done] {
            if b.pool {
                h /= 2;
                w /= 2;
            }
        }
        vec![c, h, w]
    }

    fn feature_len(&self) -> usize {
        let s = self.map_shape_after(self.blocks.len());
        match self.head_pool {
            HeadPool::Global => s[0],
            HeadPool::Pool2Flatten => s[0] * (s[1] / 2) * (s[2] / 2),
        }
    }

    /// Parameter buffers: stem, blocks (conv1, conv2), hidden, out; weights before biases.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = vec![&mut self.stem.weight, &mut self.stem.bias];
        for b in &mut self.blocks {
            v.push(&mut b.conv1.weight);
            v.push(&mut b.conv1.bias);
            v.push(&mut b.conv2.weight);
            v.push(&mut b.conv2.bias);
        }
        if let Some(h) = &mut self.hidden {
            v.push(&mut h.weight);
            v.push(&mut h.bias);
        }
        v.push(&mut self.out.weight);
        v.push(&mut self.out.bias);
        v
    }

    fn run(&self, start: usize, rep: &Tensor) -> Trace {
        let mut trace = Trace {
            start,
            stem: None,
            blocks: Vec::new(),
            block_outputs: Vec::new(),
            last_map_shape: Vec::new(),
            features: Vec::new(),
            hidden_pre: None,
            head_in: Vec::new(),
            logits: Vec::new(),
        };
        let mut x = if start == 0 {
            let pre = self.stem.forward(rep);
            let act = silu(&pre);
            trace.stem = Some((rep.clone(), pre));
            act
        } else {
            rep.clone()
        };
        let first_block = start;
        for b in &self.blocks[first_block..] {
            let pre1 = b.conv1.forward(&x);
            let act1 = silu(&pre1);
            let mut pre2 = b.conv2.forward(&act1);
            pre2.add_assign(&x);
            let mut out = silu(&pre2);
            if b.pool {
                out = avg_pool2(&out);
            }
            trace.blocks.push(BlockTrace {
                input: x,
                pre1,
                act1,
                pre2,
            });
            trace.block_outputs.push(out.clone());
            x = out;
        }
        trace.last_map_shape = x.shape().to_vec();
        let features = match self.head_pool {
            HeadPool::Global => global_avg_pool(&x),
            HeadPool::Pool2Flatten => avg_pool2(&x).into_data(),
        };
        let head_in = match &self.hidden {
            Some(h) => {
                let pre = h.forward_vec(&features);
                let act = silu(&Tensor::new(vec![pre.len()], pre.clone()).expect("vec"));
                trace.hidden_pre = Some(pre);
                act.into_data()
            }
            None => features.clone(),
        };
        trace.logits = self.out.forward_vec(&head_in);
        trace.features = features;
        trace.head_in = head_in;
        trace
    }

    fn backward(&self, trace: &Trace, dlogits: &[f64], mut grads: Option<&mut ConvNetGrads>) -> Tensor {
        let dhead_in = self
            .out
            .backward_vec(&trace.head_in, dlogits, grads.as_deref_mut().map(|g| &mut g.out));
        let dfeat = match (&self.hidden, &trace.hidden_pre) {
            (Some(h), Some(pre)) => {
                let pre_t = Tensor::new(vec![pre.len()], pre.clone()).expect("vec");
                let dy = Tensor::new(vec![pre.len()], dhead_in).expect("vec");
                let dpre = silu_backward(&pre_t, &dy);
                let hg = grads.as_deref_mut().and_then(|g| g.hidden.as_mut());
                h.backward_vec(&trace.features, dpre.data(), hg)
            }
            _ => dhead_in,
        };
        let mut dx = match self.head_pool {
            HeadPool::Global => global_avg_pool_backward(&trace.last_map_shape, &dfeat),
            HeadPool::Pool2Flatten => {
                let s = &trace.last_map_shape;
                let pooled = Tensor::new(vec![s[0], s[1] / 2, s[2] / 2], dfeat).expect("pooled shape");
                avg_pool2_backward(s, &pooled)
            }
        };
        for (offset, bt) in trace.blocks.iter().enumerate().rev() {
            let bi = trace.start + offset;
            let b = &self.blocks[bi];
            if b.pool {
                dx = avg_pool2_backward(bt.pre2.shape(), &dx);
            }
            let dpre2 = silu_backward(&bt.pre2, &dx);
            let (g1, g2) = match grads.as_deref_mut() {
                Some(g) => {
                    let (a, b2) = &mut g.blocks[bi];
                    (Some(a), Some(b2))
                }
                None => (None, None),
            };
            let dact1 = b.conv2.backward(&bt.act1, &dpre2, g2);
            let dpre1 = silu_backward(&bt.pre1, &dact1);
            let mut dinput = b.conv1.backward(&bt.input, &dpre1, g1);
            dinput.add_assign(&dpre2);
            dx = dinput;
        }
        if let Some((input, pre)) = &trace.stem {
            let dpre = silu_backward(pre, &dx);
            dx = self
                .stem
                .backward(input, &dpre, grads.as_mut().map(|g| &mut g.stem));
        }
        dx
    }

    pub fn logits(&self, input: &Tensor) -> Vec<f64> {
        self.run(0, input).logits
    }

    /// Softmax cross-entropy loss for one example; parameter gradients are accumulated into `grads`.
    pub fn accumulate_loss_grad(&self, input: &Tensor, label: usize, grads: &mut ConvNetGrads) -> (f64, usize) {
        let trace = self.run(0, input);
        let p = crate::tensor::softmax(&trace.logits);
        let loss = -(p[label].max(1e-300)).ln();
        let mut d = p.clone();
        d[label] -= 1.0;
        self.backward(&trace, &d, Some(grads));
        (loss, crate::tensor::argmax(&trace.logits))
    }

    fn check_finite_stages(&self, trace: &Trace) -> Result<()> {
        for (i, t) in trace.block_outputs.iter().enumerate() {
            if !t.is_finite() {
                return Err(DixError::Numerical {
                    layer: LayerId::new(trace.start + i + 1, SiteKind::Activation).to_string(),
                    detail: "non-finite block output".into(),
                });
            }
        }
        Ok(())
    }
}

impl VisionModel for ConvNet {
    fn architecture(&self) -> ArchitectureKind {
        ArchitectureKind::Convolutional
    }

    fn layer_ids(&self) -> Vec<LayerId> {
        std::iter::once(LayerId::INPUT)
            .chain((1..=self.blocks.len()).map(|i| LayerId::new(i, SiteKind::Activation)))
            .collect()
    }

    fn class_count(&self) -> usize {
        self.out.out
    }

    fn input_shape(&self) -> Vec<usize> {
        self.input_shape.to_vec()
    }

    fn site_shape(&self, layer: LayerId) -> Vec<usize> {
        if layer.index == 0 {
            self.input_shape.to_vec()
        } else {
            self.map_shape_after(layer.index)
        }
    }

    fn forward_capture(
        &mut self,
        input: &Tensor,
        layers: &[LayerId],
    ) -> Result<(PredictionVector, BTreeMap<LayerId, Tensor>)> {
        let trace = self.run(0, input);
        self.check_finite_stages(&trace)?;
        let mut captured = BTreeMap::new();
        for &l in layers {
            let t = if l.index == 0 {
                input.clone()
            } else {
                trace.block_outputs[l.index - 1].clone()
            };
            captured.insert(l, t);
        }
        Ok((PredictionVector::new(trace.logits), captured))
    }

    fn forward_from(&mut self, layer: LayerId, representation: &Tensor) -> Result<PredictionVector> {
        let trace = self.run(layer.index, representation);
        self.check_finite_stages(&trace)?;
        Ok(PredictionVector::new(trace.logits))
    }

    fn grad_at(&mut self, layer: LayerId, representation: &Tensor, class_index: usize) -> Result<Tensor> {
        let trace = self.run(layer.index, representation);
        let mut d = vec![0.0; self.out.out];
        d[class_index] = 1.0;
        Ok(self.backward(&trace, &d, None))
    }

    fn randomizable_layers(&self) -> Vec<String> {
        std::iter::once("stem".to_string())
            .chain((1..=self.blocks.len()).map(|i| format!("block{i}")))
            .chain(std::iter::once("head".to_string()))
            .collect()
    }

    fn randomize_layer(&mut self, index: usize, seed: u64) -> Result<()> {
        self.init_group(index, seed, RANDOMIZE_SALT);
        Ok(())
    }

    fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |v: &[f64]| {
            for x in v {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        };
        push(&self.stem.weight);
        push(&self.stem.bias);
        for b in &self.blocks {
            push(&b.conv1.weight);
            push(&b.conv1.bias);
            push(&b.conv2.weight);
            push(&b.conv2.bias);
        }
        if let Some(h) = &self.hidden {
            push(&h.weight);
            push(&h.bias);
        }
        push(&self.out.weight);
        push(&self.out.bias);
        out
    }

    fn box_clone(&self) -> Box<dyn VisionModel> {
        Box::new(self.clone())
    }
}
