//! Named method configurations and the single-call `explain` entry point.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    aggregate, dix_layer_map_cnn, dix_layer_map_vit, integrated_gradients, normalize_map, resize, Aggregation,
    BaselineSpec, ExplanationMap, Grid, IntegrandSpec, LayerSelection, PathSpec, Provenance,
};
use crate::adapters::{ArchitectureKind, LayerId, ModelHandle, SiteKind};
use crate::error::{DixError, Result};
use crate::rollout::{attention_rollout, RolloutConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodPreset {
    Dix1,
    Dix2,
    Dix3,
    Dix2Mul,
    Dix3Grads,
    Ig,
    Rollout,
}

impl MethodPreset {
    pub const ALL: [MethodPreset; 7] = [
        MethodPreset::Dix1,
        MethodPreset::Dix2,
        MethodPreset::Dix3,
        MethodPreset::Dix2Mul,
        MethodPreset::Dix3Grads,
        MethodPreset::Ig,
        MethodPreset::Rollout,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodPreset::Dix1 => "dix1",
            MethodPreset::Dix2 => "dix2",
            MethodPreset::Dix3 => "dix3",
            MethodPreset::Dix2Mul => "dix2_mul",
            MethodPreset::Dix3Grads => "dix3_grads",
            MethodPreset::Ig => "ig",
            MethodPreset::Rollout => "rollout",
        }
    }

    pub fn config(&self) -> MethodConfig {
        let dix = |last: usize, aggregation, integrand| MethodConfig {
            kind: MethodKind::Dix,
            sites: SiteChoice::Last(last),
            aggregation,
            integrand,
            path: PathSpec::default(),
            baseline: None,
        };
        match self {
            MethodPreset::Dix1 => dix(1, Aggregation::Mean, None),
            MethodPreset::Dix2 => dix(2, Aggregation::Mean, None),
            MethodPreset::Dix3 => dix(3, Aggregation::Mean, None),
            MethodPreset::Dix2Mul => dix(2, Aggregation::ElementwiseProduct, None),
            MethodPreset::Dix3Grads => dix(3, Aggregation::Mean, Some(IntegrandSpec::GradientOnly)),
            MethodPreset::Ig => MethodConfig {
                kind: MethodKind::IntegratedGradients,
                sites: SiteChoice::Explicit(vec![0]),
                aggregation: Aggregation::Mean,
                integrand: Some(IntegrandSpec::GradientOnly),
                path: PathSpec::default(),
                baseline: Some(BaselineSpec::Zero),
            },
            MethodPreset::Rollout => MethodConfig {
                kind: MethodKind::AttentionRollout,
                sites: SiteChoice::AllAttention,
                aggregation: Aggregation::Mean,
                integrand: None,
                path: PathSpec::default(),
                baseline: None,
            },
        }
    }
}

impl fmt::Display for MethodPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodPreset {
    type Err = DixError;

    fn from_str(s: &str) -> Result<Self> {
        MethodPreset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                DixError::config(format!(
                    "unknown method preset {s:?}; valid presets: {}",
                    MethodPreset::ALL.map(|p| p.as_str()).join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Dix,
    IntegratedGradients,
    AttentionRollout,
}

/// Which hookable sites a method reads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteChoice {
    /// The last `k` non-input sites (`L-k+1 ..= L`).
    Last(usize),
    Explicit(Vec<usize>),
    AllAttention,
}

/// Method description before it is bound to a model.
///
/// `integrand` and `baseline` left as `None` take the architecture defaults:
/// activation-times-gradient with channel-minimum baseline on convolutional
/// sites, gradient rollout with zero baseline on attention sites.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodConfig {
    pub kind: MethodKind,
    pub sites: SiteChoice,
    pub aggregation: Aggregation,
    pub integrand: Option<IntegrandSpec>,
    pub path: PathSpec,
    pub baseline: Option<BaselineSpec>,
}

/// A method bound to concrete sites of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedMethod {
    pub kind: MethodKind,
    pub selection: LayerSelection,
    pub integrand: IntegrandSpec,
    pub path: PathSpec,
    pub baseline: BaselineSpec,
}

impl MethodConfig {
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.path = PathSpec::with_steps(steps);
        self
    }

    pub fn resolve(&self, model: &ModelHandle) -> Result<ResolvedMethod> {
        let arch = model.architecture();
        let sites: Vec<LayerId> = model
            .layer_ids()
            .into_iter()
            .filter(|l| l.site != SiteKind::Input)
            .collect();
        let layers = match (&self.sites, self.kind) {
            (_, MethodKind::IntegratedGradients) => vec![LayerId::INPUT],
            (SiteChoice::AllAttention, _) => {
                let att: Vec<LayerId> = sites.iter().copied().filter(|l| l.site == SiteKind::Attention).collect();
                if att.is_empty() {
                    return Err(DixError::capability(format!(
                        "{} has no attention sites to roll out",
                        model.name()
                    )));
                }
                att
            }
            (SiteChoice::Last(k), _) => {
                if *k == 0 || *k > sites.len() {
                    return Err(DixError::config(format!(
                        "cannot select the last {k} sites of {}, which has {}",
                        model.name(),
                        sites.len()
                    )));
                }
                sites[sites.len() - k..].to_vec()
            }
            (SiteChoice::Explicit(indices), _) => {
                if indices.is_empty() {
                    return Err(DixError::config("layer selection is empty"));
                }
                indices.iter().map(|&i| model.layer(i)).collect::<Result<Vec<_>>>()?
            }
        };
        if self.kind == MethodKind::AttentionRollout && arch != ArchitectureKind::Transformer {
            return Err(DixError::capability("attention rollout needs a transformer model"));
        }
        let attention = layers.iter().any(|l| l.site == SiteKind::Attention);
        let integrand = self.integrand.unwrap_or(if attention {
            IntegrandSpec::gradient_rollout()
        } else {
            IntegrandSpec::ActivationTimesGradient
        });
        let baseline = self.baseline.clone().unwrap_or(if attention {
            BaselineSpec::Zero
        } else {
            BaselineSpec::ChannelMin
        });
        if attention && baseline != BaselineSpec::Zero {
            return Err(DixError::config("attention sites interpolate from the zero baseline"));
        }
        Ok(ResolvedMethod {
            kind: self.kind,
            selection: LayerSelection {
                layers,
                aggregation: self.aggregation,
            },
            integrand,
            path: self.path,
            baseline,
        })
    }
}

/// Explains `input` with a resolved method. `class_index` defaults to the predicted class.
pub fn explain(
    model: &mut ModelHandle,
    input: &Tensor,
    class_index: Option<usize>,
    method: &ResolvedMethod,
) -> Result<ExplanationMap> {
    let class_index = match class_index {
        Some(c) => c,
        None => model.forward(input)?.top_class(),
    };
    match method.kind {
        MethodKind::IntegratedGradients => {
            integrated_gradients(model, input, class_index, &method.path, &method.baseline)
        }
        MethodKind::AttentionRollout => {
            let (_, captured) = model.forward_capture(input, &method.selection.layers)?;
            let blocks: Vec<Tensor> = method.selection.layers.iter().map(|l| captured[l].clone()).collect();
            let g = attention_rollout(&blocks, &RolloutConfig::attention())?;
            let s = model.input_shape();
            let values = resize::bilinear(&g.values, g.side, g.side, s[1], s[2]);
            let mut map = ExplanationMap::from_grid(Grid::new(s[1], s[2], values)?, class_index);
            map.provenance = Provenance {
                model_id: model.model_id(),
                method: "rollout".into(),
                path: None,
                baseline: None,
                integrand: None,
                layers: method.selection.layers.iter().map(|l| l.index).collect(),
                aggregation: None,
                normalized: false,
            };
            Ok(map)
        }
        MethodKind::Dix => {
            let maps = method
                .selection
                .layers
                .iter()
                .map(|&layer| match layer.site {
                    SiteKind::Attention => {
                        dix_layer_map_vit(model, input, class_index, layer, &method.path, &method.integrand)
                    }
                    _ => dix_layer_map_cnn(
                        model,
                        input,
                        class_index,
                        layer,
                        &method.path,
                        &method.baseline,
                        &method.integrand,
                    ),
                })
                .collect::<Result<Vec<_>>>()?;
            aggregate(&maps, &method.selection)
        }
    }
}

/// `explain` followed by min-max normalization.
pub fn explain_normalized(
    model: &mut ModelHandle,
    input: &Tensor,
    class_index: Option<usize>,
    method: &ResolvedMethod,
) -> Result<ExplanationMap> {
    explain(model, input, class_index, method).map(|m| normalize_map(&m))
}
