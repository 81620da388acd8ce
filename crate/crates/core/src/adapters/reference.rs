use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::analytic::AnalyticModel;
use super::convnet::{ConvNet, ConvNetSpec, HeadPool};
use super::nn::layer_rng;
use super::vit::{TinyVit, VitSpec};
use super::ModelHandle;
use crate::error::{DixError, Result};

/// Built-in desk-scale models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Linear,
    TinyCnn,
    TinyVit,
    #[serde(rename = "tiny_classifier_10class")]
    TinyClassifier10,
}

impl ReferenceKind {
    pub const ALL: [ReferenceKind; 4] = [
        ReferenceKind::Linear,
        ReferenceKind::TinyCnn,
        ReferenceKind::TinyVit,
        ReferenceKind::TinyClassifier10,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ReferenceKind::Linear => "linear",
            ReferenceKind::TinyCnn => "tiny_cnn",
            ReferenceKind::TinyVit => "tiny_vit",
            ReferenceKind::TinyClassifier10 => "tiny_classifier_10class",
        }
    }

    /// Architecture of the convolutional kinds; `None` for the others.
    pub fn convnet_spec(&self) -> Option<ConvNetSpec> {
        match self {
            ReferenceKind::TinyCnn => Some(ConvNetSpec {
                input_shape: [3, 8, 8],
                channels: 6,
                pools: vec![false, true, false],
                head_pool: HeadPool::Global,
                hidden: None,
                classes: 5,
            }),
            ReferenceKind::TinyClassifier10 => Some(ConvNetSpec {
                input_shape: [3, 8, 8],
                channels: 8,
                pools: vec![false, false, false],
                head_pool: HeadPool::Pool2Flatten,
                hidden: Some(48),
                classes: 10,
            }),
            _ => None,
        }
    }
}

impl fmt::Display for ReferenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReferenceKind {
    type Err = DixError;

    fn from_str(s: &str) -> Result<Self> {
        ReferenceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                DixError::config(format!(
                    "unknown reference model kind {s:?}; expected one of {}",
                    ReferenceKind::ALL.map(|k| k.as_str()).join(", ")
                ))
            })
    }
}

pub fn reference_convnet(kind: ReferenceKind, seed: u64) -> Result<ConvNet> {
    let spec = kind
        .convnet_spec()
        .ok_or_else(|| DixError::config(format!("{kind} is not convolutional")))?;
    Ok(ConvNet::new(&spec, seed))
}

pub fn reference_vit(seed: u64) -> TinyVit {
    TinyVit::new(
        &VitSpec {
            input_shape: [3, 8, 8],
            patch: 4,
            dim: 8,
            heads: 2,
            mlp: 16,
            blocks: 2,
            classes: 5,
        },
        seed,
    )
    .expect("reference vit spec is valid")
}

fn reference_linear(seed: u64) -> AnalyticModel {
    let shape = [3, 8, 8];
    let n: usize = shape.iter().product();
    let mut rng = layer_rng(seed, 0, 0);
    let dist = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("finite std");
    let weights = (0..3)
        .map(|_| (0..n).map(|_| dist.sample(&mut rng)).collect())
        .collect();
    AnalyticModel::linear(weights, &shape).expect("reference linear spec is valid")
}

/// Deterministic built-in model for `(kind, seed)`.
pub fn make_reference_model(kind: ReferenceKind, seed: u64) -> Result<ModelHandle> {
    let name = format!("{kind}/seed{seed}");
    match kind {
        ReferenceKind::Linear => ModelHandle::new(name, Box::new(reference_linear(seed))),
        ReferenceKind::TinyCnn | ReferenceKind::TinyClassifier10 => {
            ModelHandle::new(name, Box::new(reference_convnet(kind, seed)?))
        }
        ReferenceKind::TinyVit => ModelHandle::new(name, Box::new(reference_vit(seed))),
    }
}
