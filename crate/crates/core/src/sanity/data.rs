//! Label-permutation retraining check.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{accuracy, train_convnet, TrainConfig, TrainOutcome};
use super::{spearman, CorrelationSummary, LabeledDataset};
use crate::adapters::{reference_convnet, ConvNet, ModelHandle, ReferenceKind};
use crate::attribution::{explain, MethodConfig};
use crate::error::{DixError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRandomizationConfig {
    pub train: TrainConfig,
    /// Allowed distance of the permuted model's test accuracy from `1/K`.
    pub chance_margin: f64,
    /// Number of test images whose explanations are compared.
    pub fixtures: usize,
}

impl Default for DataRandomizationConfig {
    fn default() -> Self {
        DataRandomizationConfig {
            train: TrainConfig::default(),
            chance_margin: 0.05,
            fixtures: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRandomizationReport {
    /// True-label model against permuted-label model.
    pub permuted: CorrelationSummary,
    /// True-label model against a second true-label model trained from another seed.
    pub reseeded: CorrelationSummary,
    pub true_training: TrainOutcome,
    pub permuted_training: TrainOutcome,
    pub reseeded_training: TrainOutcome,
    pub true_test_accuracy: f64,
    pub permuted_test_accuracy: f64,
    pub chance: f64,
    pub within_chance: bool,
    pub seed: u64,
}

/// Seeded shuffle of the label column across training examples.
pub fn permute_labels(data: &[(Tensor, usize)], seed: u64) -> Vec<(Tensor, usize)> {
    let mut labels: Vec<usize> = data.iter().map(|(_, y)| *y).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    data.iter().zip(labels).map(|((x, _), y)| (x.clone(), y)).collect()
}

fn trained(
    kind: ReferenceKind,
    data: &[(Tensor, usize)],
    cfg: &TrainConfig,
    seed: u64,
    label: &str,
) -> Result<(ConvNet, TrainOutcome)> {
    let mut net = reference_convnet(kind, seed)?;
    let outcome = train_convnet(&mut net, data, cfg, seed, label)?;
    Ok((net, outcome))
}

fn paired_summary(
    a: &mut ModelHandle,
    b: &mut ModelHandle,
    method: &MethodConfig,
    fixtures: &[Tensor],
) -> Result<CorrelationSummary> {
    let ra = method.resolve(a)?;
    let rb = method.resolve(b)?;
    let mut values = Vec::with_capacity(fixtures.len());
    let mut degenerate = 0;
    for x in fixtures {
        let ma = explain(a, x, None, &ra)?;
        let mb = explain(b, x, None, &rb)?;
        let c = spearman(&ma, &mb)?;
        values.push(c.value);
        degenerate += usize::from(c.degenerate);
    }
    CorrelationSummary::from_values(values, degenerate)
}

/// Trains true-label, permuted-label and reseeded true-label models and
/// compares their explanations on test fixtures. Each model explains its own
/// top-1 prediction.
pub fn data_randomization(
    kind: ReferenceKind,
    dataset: &LabeledDataset,
    method: &MethodConfig,
    seed: u64,
    config: &DataRandomizationConfig,
) -> Result<DataRandomizationReport> {
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(DixError::config("data randomization needs train and test splits"));
    }
    let permuted_data = permute_labels(&dataset.train, seed ^ 0x5eed);
    let jobs: [(&[(Tensor, usize)], u64, &str); 3] = [
        (&dataset.train, seed, "true-label model"),
        (&permuted_data, seed, "permuted-label model"),
        (&dataset.train, seed + 1, "reseeded true-label model"),
    ];
    let run = |(data, s, label): (&[(Tensor, usize)], u64, &str)| trained(kind, data, &config.train, s, label);
    let mut results: Vec<Result<(ConvNet, TrainOutcome)>> = if crate::is_deterministic() {
        jobs.into_iter().map(run).collect()
    } else {
        use rayon::prelude::*;
        jobs.into_par_iter().map(run).collect()
    };
    let (reseeded_net, reseeded_training) = results.pop().expect("three jobs")?;
    let (permuted_net, permuted_training) = results.pop().expect("three jobs")?;
    let (true_net, true_training) = results.pop().expect("three jobs")?;

    let chance = 1.0 / dataset.classes as f64;
    let true_test_accuracy = accuracy(&true_net, &dataset.test);
    let permuted_test_accuracy = accuracy(&permuted_net, &dataset.test);
    let within_chance = (permuted_test_accuracy - chance).abs() <= config.chance_margin;

    let name = |tag: &str| format!("{kind}/{tag}-seed{seed}");
    let mut true_model = ModelHandle::new(name("true"), Box::new(true_net))?;
    let mut permuted_model = ModelHandle::new(name("permuted"), Box::new(permuted_net))?;
    let mut reseeded_model = ModelHandle::new(name("reseeded"), Box::new(reseeded_net))?;
    let fixtures: Vec<Tensor> = dataset
        .test
        .iter()
        .take(config.fixtures.max(1))
        .map(|(x, _)| x.clone())
        .collect();
    let permuted = paired_summary(&mut true_model, &mut permuted_model, method, &fixtures)?;
    let reseeded = paired_summary(&mut true_model, &mut reseeded_model, method, &fixtures)?;
    Ok(DataRandomizationReport {
        permuted,
        reseeded,
        true_training,
        permuted_training,
        reseeded_training,
        true_test_accuracy,
        permuted_test_accuracy,
        chance,
        within_chance,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_keeps_label_multiset() {
        let data: Vec<(Tensor, usize)> = (0..20).map(|i| (Tensor::zeros(&[1]), i % 10)).collect();
        let p = permute_labels(&data, 9);
        let mut a: Vec<usize> = data.iter().map(|d| d.1).collect();
        let mut b: Vec<usize> = p.iter().map(|d| d.1).collect();
        assert_ne!(a, b);
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
}
