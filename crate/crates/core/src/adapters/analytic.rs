use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ArchitectureKind, LayerId, PredictionVector, SiteKind, VisionModel};
use crate::error::{DixError, Result};
use crate::tensor::Tensor;

/// Closed-form models with hand-checkable outputs and gradients.
///
/// Sites: 0 = input, 1 = an identity copy of the input feeding the head, so
/// that the head is reachable as the sub-network at an activation site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticModel {
    input_shape: Vec<usize>,
    head: AnalyticHead,
    /// Inputs are rounded to integers before the head; the input site is then
    /// not differentiable.
    quantized_input: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum AnalyticHead {
    /// `f_k(v) = w_k . v + b_k`
    Affine { weights: Vec<Vec<f64>>, bias: Vec<f64> },
    /// `f(v) = sum v_i^2`
    Quadratic,
}

impl AnalyticModel {
    pub fn linear(weights: Vec<Vec<f64>>, input_shape: &[usize]) -> Result<Self> {
        let k = weights.len();
        Self::affine(weights, vec![0.0; k], input_shape)
    }

    pub fn affine(weights: Vec<Vec<f64>>, bias: Vec<f64>, input_shape: &[usize]) -> Result<Self> {
        let n: usize = input_shape.iter().product();
        if weights.is_empty() || weights.iter().any(|w| w.len() != n) || bias.len() != weights.len() {
            return Err(DixError::config(format!(
                "affine head needs K >= 1 rows of length {n} and K biases"
            )));
        }
        Ok(AnalyticModel {
            input_shape: input_shape.to_vec(),
            head: AnalyticHead::Affine { weights, bias },
            quantized_input: false,
        })
    }

    pub fn quadratic(input_shape: &[usize]) -> Self {
        AnalyticModel {
            input_shape: input_shape.to_vec(),
            head: AnalyticHead::Quadratic,
            quantized_input: false,
        }
    }

    pub fn with_quantized_input(mut self) -> Self {
        self.quantized_input = true;
        self
    }

    fn head_scores(&self, v: &[f64]) -> Vec<f64> {
        match &self.head {
            AnalyticHead::Affine { weights, bias } => weights
                .iter()
                .zip(bias)
                .map(|(w, b)| b + w.iter().zip(v).map(|(a, x)| a * x).sum::<f64>())
                .collect(),
            AnalyticHead::Quadratic => vec![v.iter().map(|x| x * x).sum()],
        }
    }

    fn head_grad(&self, v: &[f64], class: usize) -> Vec<f64> {
        match &self.head {
            AnalyticHead::Affine { weights, .. } => weights[class].clone(),
            AnalyticHead::Quadratic => v.iter().map(|x| 2.0 * x).collect(),
        }
    }

    fn encode(&self, input: &Tensor) -> Tensor {
        if self.quantized_input {
            input.map(f64::round)
        } else {
            input.clone()
        }
    }
}

impl VisionModel for AnalyticModel {
    fn architecture(&self) -> ArchitectureKind {
        ArchitectureKind::Analytic
    }

    fn layer_ids(&self) -> Vec<LayerId> {
        vec![LayerId::INPUT, LayerId::new(1, SiteKind::Activation)]
    }

    fn class_count(&self) -> usize {
        match &self.head {
            AnalyticHead::Affine { weights, .. } => weights.len(),
            AnalyticHead::Quadratic => 1,
        }
    }

    fn input_shape(&self) -> Vec<usize> {
        self.input_shape.clone()
    }

    fn site_shape(&self, _layer: LayerId) -> Vec<usize> {
        self.input_shape.clone()
    }

    fn forward_capture(
        &mut self,
        input: &Tensor,
        layers: &[LayerId],
    ) -> Result<(PredictionVector, BTreeMap<LayerId, Tensor>)> {
        let hidden = self.encode(input);
        let mut captured = BTreeMap::new();
        for &l in layers {
            let t = if l.index == 0 { input.clone() } else { hidden.clone() };
            captured.insert(l, t);
        }
        Ok((PredictionVector::new(self.head_scores(hidden.data())), captured))
    }

    fn forward_from(&mut self, layer: LayerId, representation: &Tensor) -> Result<PredictionVector> {
        let hidden = if layer.index == 0 {
            self.encode(representation)
        } else {
            representation.clone()
        };
        Ok(PredictionVector::new(self.head_scores(hidden.data())))
    }

    fn grad_at(&mut self, layer: LayerId, representation: &Tensor, class_index: usize) -> Result<Tensor> {
        if layer.index == 0 && self.quantized_input {
            return Err(DixError::capability(
                "input site is integer-quantized and has no gradient",
            ));
        }
        let g = self.head_grad(representation.data(), class_index);
        Tensor::new(representation.shape().to_vec(), g)
    }

    fn randomizable_layers(&self) -> Vec<String> {
        vec!["head".into()]
    }

    fn randomize_layer(&mut self, _index: usize, seed: u64) -> Result<()> {
        use rand_distr::{Distribution, Normal};
        match &mut self.head {
            AnalyticHead::Affine { weights, bias } => {
                let mut rng = super::nn::layer_rng(seed, 0, 1);
                let n = self.input_shape.iter().product::<usize>() as f64;
                let dist = Normal::new(0.0, 1.0 / n.sqrt()).expect("finite std");
                for row in weights.iter_mut() {
                    row.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
                }
                bias.iter_mut().for_each(|b| *b = 0.0);
                Ok(())
            }
            AnalyticHead::Quadratic => Err(DixError::capability("quadratic head has no parameters")),
        }
    }

    fn weight_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("analytic model serializes")
    }

    fn box_clone(&self) -> Box<dyn VisionModel> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::ModelHandle;

    #[test]
    fn linear_forward_by_hand() {
        let model = AnalyticModel::linear(vec![vec![1.0, 2.0], vec![3.0, 4.0]], &[1, 1, 2]).unwrap();
        let mut h = ModelHandle::new("lin", Box::new(model)).unwrap();
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let (pred, cap) = h.forward_capture(&x, &[LayerId::INPUT]).unwrap();
        assert_eq!(pred.scores, vec![3.0, 7.0]);
        assert_eq!(cap[&LayerId::INPUT].data(), &[1.0, 1.0]);
    }

    #[test]
    fn linear_gradient_is_weight_row() {
        let model = AnalyticModel::linear(vec![vec![1.0, -2.0, 0.5]], &[1, 1, 3]).unwrap();
        let mut h = ModelHandle::new("lin", Box::new(model)).unwrap();
        let r = Tensor::new(vec![1, 1, 3], vec![0.3, 7.0, -1.0]).unwrap();
        let g = h.grad_at(LayerId::new(1, SiteKind::Activation), &r, 0).unwrap();
        assert_eq!(g.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn quadratic_gradient_by_hand() {
        let mut h = ModelHandle::new("quad", Box::new(AnalyticModel::quadratic(&[1, 1, 2]))).unwrap();
        let r = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        let g = h.grad_at(LayerId::new(1, SiteKind::Activation), &r, 0).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0]);
    }

    #[test]
    fn quantized_input_has_no_gradient() {
        let model = AnalyticModel::linear(vec![vec![1.0, 1.0]], &[1, 1, 2])
            .unwrap()
            .with_quantized_input();
        let mut h = ModelHandle::new("q", Box::new(model)).unwrap();
        let r = Tensor::new(vec![1, 1, 2], vec![0.4, 1.6]).unwrap();
        assert!(matches!(
            h.grad_at(LayerId::INPUT, &r, 0),
            Err(DixError::Capability(_))
        ));
        assert_eq!(h.forward(&r).unwrap().scores, vec![2.0]);
    }
}
