//! Minibatch Adam on softmax cross-entropy for the convolutional reference models.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{ConvNet, ConvNetGrads};
use crate::error::{DixError, Result};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Training stops once accuracy on the training set exceeds this.
    pub target_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 16,
            max_epochs: 400,
            target_accuracy: 0.95,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: usize,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

pub fn accuracy(net: &ConvNet, data: &[(Tensor, usize)]) -> f64 {
    let hits = data
        .iter()
        .filter(|(x, y)| argmax(&net.logits(x)) == *y)
        .count();
    hits as f64 / data.len() as f64
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &mut ConvNet) -> Self {
        let sizes: Vec<usize> = net.params_mut().iter().map(|p| p.len()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut ConvNet, grads: &ConvNetGrads, scale: f64, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, (p, g)) in net.params_mut().into_iter().zip(grads.flat()).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * gi;
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains until training accuracy exceeds the target, checked after each epoch.
///
/// Returns a protocol error naming `label` when the epoch budget runs out first.
pub fn train_convnet(
    net: &mut ConvNet,
    data: &[(Tensor, usize)],
    config: &TrainConfig,
    seed: u64,
    label: &str,
) -> Result<TrainOutcome> {
    if data.is_empty() || config.batch_size == 0 {
        return Err(DixError::config("training needs data and a positive batch size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(net);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_acc = accuracy(net, data);
    let mut last_loss = f64::NAN;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = ConvNetGrads::zeros_like(net);
            for &i in batch {
                let (x, y) = &data[i];
                loss_sum += net.accumulate_loss_grad(x, *y, &mut grads).0;
            }
            adam.step(net, &grads, 1.0 / batch.len() as f64, config.learning_rate);
        }
        last_loss = loss_sum / data.len() as f64;
        if !last_loss.is_finite() {
            return Err(DixError::Numerical {
                layer: label.to_string(),
                detail: format!("training loss diverged at epoch {epoch}"),
            });
        }
        last_acc = accuracy(net, data);
        log::debug!("{label}: epoch {epoch} loss {last_loss:.4} train acc {last_acc:.3}");
        if last_acc > config.target_accuracy {
            return Ok(TrainOutcome {
                epochs: epoch,
                train_accuracy: last_acc,
                final_loss: last_loss,
            });
        }
    }
    Err(DixError::Protocol(format!(
        "{label}: training accuracy {last_acc:.3} (loss {last_loss:.4}) did not exceed {} within {} epochs",
        config.target_accuracy, config.max_epochs
    )))
}
