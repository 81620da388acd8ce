//! Uniform introspection over differentiable vision models.
//!
//! A model exposes an ordered list of hookable sites. Site 0 is always the
//! input; later sites are block outputs (convolutional models) or per-block
//! post-softmax attention tensors (transformers). For every site a model can
//! capture the representation, run the remaining sub-network from a
//! substituted representation, and differentiate a class score with respect
//! to it.

mod analytic;
mod convnet;
pub mod nn;
mod plugin;
mod reference;
mod vit;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DixError, Result};
use crate::tensor::{argmax, softmax, Tensor};

pub use analytic::AnalyticModel;
pub use convnet::{ConvNet, ConvNetGrads, ConvNetSpec, HeadPool, ResBlock};
pub use plugin::{load_external_model, register_plugin, registered_plugins, ModelPlugin};
pub use reference::{make_reference_model, reference_convnet, reference_vit, ReferenceKind};
pub use vit::{TinyVit, VitSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    Convolutional,
    Transformer,
    Analytic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Input,
    Activation,
    Attention,
}

/// Address of a hookable representation site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId {
    pub index: usize,
    pub site: SiteKind,
}

impl LayerId {
    pub const INPUT: LayerId = LayerId {
        index: 0,
        site: SiteKind::Input,
    };

    pub fn new(index: usize, site: SiteKind) -> Self {
        LayerId { index, site }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.site {
            SiteKind::Input => "input",
            SiteKind::Activation => "activation",
            SiteKind::Attention => "attention",
        };
        write!(f, "{}@{}", kind, self.index)
    }
}

/// Class scores of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionVector {
    pub scores: Vec<f64>,
    pub target_index: Option<usize>,
}

impl PredictionVector {
    pub fn new(scores: Vec<f64>) -> Self {
        PredictionVector {
            scores,
            target_index: None,
        }
    }

    pub fn top_class(&self) -> usize {
        argmax(&self.scores)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.scores)
    }

    pub fn probability(&self, class: usize) -> f64 {
        self.probabilities()[class]
    }
}

/// Attention tensors and their gradients at every block, from one backward pass.
#[derive(Clone, Debug)]
pub struct AttentionPass {
    pub prediction: PredictionVector,
    /// `(heads, tokens, tokens)` per block, in forward order, as used in the pass.
    pub attentions: Vec<Tensor>,
    pub gradients: Vec<Tensor>,
}

/// Behaviour every model adapter provides.
///
/// Implementations may keep hook state (the transformer remembers the input
/// of the most recent capture so that attention substitutions can be replayed),
/// hence `&mut self` on the evaluation methods.
pub trait VisionModel: Send {
    fn architecture(&self) -> ArchitectureKind;
    fn layer_ids(&self) -> Vec<LayerId>;
    fn class_count(&self) -> usize;
    fn input_shape(&self) -> Vec<usize>;
    fn site_shape(&self, layer: LayerId) -> Vec<usize>;

    fn forward_capture(
        &mut self,
        input: &Tensor,
        layers: &[LayerId],
    ) -> Result<(PredictionVector, BTreeMap<LayerId, Tensor>)>;

    fn forward_from(&mut self, layer: LayerId, representation: &Tensor) -> Result<PredictionVector>;

    fn grad_at(&mut self, layer: LayerId, representation: &Tensor, class_index: usize) -> Result<Tensor>;

    /// Substitutes `representation` at attention site `layer` and returns the
    /// attention and gradient of `class_index` at every block.
    fn attention_pass(
        &mut self,
        layer: LayerId,
        representation: &Tensor,
        class_index: usize,
    ) -> Result<AttentionPass> {
        let _ = (layer, representation, class_index);
        Err(DixError::capability("model has no attention sites"))
    }

    /// Names of randomizable parameter groups, bottom (input side) to top.
    fn randomizable_layers(&self) -> Vec<String>;

    /// Redraws parameter group `index` from its initialization distribution.
    fn randomize_layer(&mut self, index: usize, seed: u64) -> Result<()>;

    /// Canonical bytes of all parameters.
    fn weight_bytes(&self) -> Vec<u8>;

    fn box_clone(&self) -> Box<dyn VisionModel>;
}

/// Opaque handle around a model adapter that validates every call.
pub struct ModelHandle {
    name: String,
    inner: Box<dyn VisionModel>,
}

impl Clone for ModelHandle {
    fn clone(&self) -> Self {
        ModelHandle {
            name: self.name.clone(),
            inner: self.inner.box_clone(),
        }
    }
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("name", &self.name)
            .field("architecture", &self.inner.architecture())
            .field("layers", &self.inner.layer_ids())
            .finish()
    }
}

impl ModelHandle {
    pub fn new(name: impl Into<String>, inner: Box<dyn VisionModel>) -> Result<Self> {
        let handle = ModelHandle {
            name: name.into(),
            inner,
        };
        handle.validate()?;
        Ok(handle)
    }

    fn validate(&self) -> Result<()> {
        let ids = self.inner.layer_ids();
        if ids.first() != Some(&LayerId::INPUT) {
            return Err(DixError::config("layer list must start with the input site"));
        }
        for (pos, id) in ids.iter().enumerate() {
            if id.index != pos {
                return Err(DixError::config(format!("layer {id} is out of order")));
            }
            if pos > 0 && id.site == SiteKind::Input {
                return Err(DixError::config(format!("{id}: only index 0 may be the input site")));
            }
            if id.site == SiteKind::Attention && self.inner.architecture() != ArchitectureKind::Transformer {
                return Err(DixError::config(format!("{id}: attention sites require a transformer")));
            }
        }
        let k = self.inner.class_count();
        let min_k = if self.inner.architecture() == ArchitectureKind::Analytic { 1 } else { 2 };
        if k < min_k {
            return Err(DixError::config(format!("class count {k} below {min_k}")));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn architecture(&self) -> ArchitectureKind {
        self.inner.architecture()
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        self.inner.layer_ids()
    }

    /// Index of the last hookable site.
    pub fn last_layer(&self) -> usize {
        self.inner.layer_ids().len() - 1
    }

    pub fn layer(&self, index: usize) -> Result<LayerId> {
        self.inner
            .layer_ids()
            .get(index)
            .copied()
            .ok_or_else(|| DixError::addressing(format!("no layer with index {index} (last is {})", self.last_layer())))
    }

    pub fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape()
    }

    pub fn site_shape(&self, layer: LayerId) -> Result<Vec<usize>> {
        self.check_layer(layer)?;
        Ok(self.inner.site_shape(layer))
    }

    /// Short hex digest identifying the current parameter values.
    pub fn weight_state(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.inner.weight_bytes());
        hex::encode(&digest[..8])
    }

    /// `name#weight_state`, used in provenance records.
    pub fn model_id(&self) -> String {
        format!("{}#{}", self.name, self.weight_state())
    }

    fn check_layer(&self, layer: LayerId) -> Result<()> {
        if !self.inner.layer_ids().contains(&layer) {
            return Err(DixError::addressing(format!(
                "unknown layer {layer} for model {} (sites: {:?})",
                self.name,
                self.inner.layer_ids().iter().map(|l| l.to_string()).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    fn check_rep(&self, layer: LayerId, rep: &Tensor) -> Result<()> {
        self.check_layer(layer)?;
        rep.expect_shape(&self.inner.site_shape(layer))
            .map_err(|e| DixError::addressing(format!("{layer}: {e}")))
    }

    fn check_class(&self, class_index: usize) -> Result<()> {
        if class_index >= self.class_count() {
            return Err(DixError::addressing(format!(
                "class index {class_index} out of range for {} classes",
                self.class_count()
            )));
        }
        Ok(())
    }

    fn check_prediction(&self, layer: &str, p: &PredictionVector) -> Result<()> {
        if p.scores.iter().any(|v| !v.is_finite()) {
            return Err(DixError::Numerical {
                layer: layer.to_string(),
                detail: "non-finite class scores".into(),
            });
        }
        Ok(())
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<PredictionVector> {
        self.forward_from(LayerId::INPUT, input)
    }

    pub fn forward_capture(
        &mut self,
        input: &Tensor,
        layers: &[LayerId],
    ) -> Result<(PredictionVector, BTreeMap<LayerId, Tensor>)> {
        self.check_rep(LayerId::INPUT, input)?;
        for &l in layers {
            self.check_layer(l)?;
        }
        let (pred, captured) = self.inner.forward_capture(input, layers)?;
        for (layer, t) in &captured {
            if !t.is_finite() {
                return Err(DixError::Numerical {
                    layer: layer.to_string(),
                    detail: "non-finite values in captured representation".into(),
                });
            }
        }
        self.check_prediction("output", &pred)?;
        Ok((pred, captured))
    }

    pub fn forward_from(&mut self, layer: LayerId, representation: &Tensor) -> Result<PredictionVector> {
        self.check_rep(layer, representation)?;
        let pred = self.inner.forward_from(layer, representation)?;
        self.check_prediction("output", &pred)?;
        Ok(pred)
    }

    pub fn grad_at(&mut self, layer: LayerId, representation: &Tensor, class_index: usize) -> Result<Tensor> {
        self.check_rep(layer, representation)?;
        self.check_class(class_index)?;
        let g = self.inner.grad_at(layer, representation, class_index)?;
        g.expect_shape(representation.shape())?;
        if !g.is_finite() {
            return Err(DixError::Numerical {
                layer: layer.to_string(),
                detail: "non-finite gradient".into(),
            });
        }
        Ok(g)
    }

    pub fn attention_pass(
        &mut self,
        layer: LayerId,
        representation: &Tensor,
        class_index: usize,
    ) -> Result<AttentionPass> {
        self.check_rep(layer, representation)?;
        self.check_class(class_index)?;
        if layer.site != SiteKind::Attention {
            return Err(DixError::config(format!("{layer} is not an attention site")));
        }
        self.inner.attention_pass(layer, representation, class_index)
    }

    pub fn randomizable_layers(&self) -> Vec<String> {
        self.inner.randomizable_layers()
    }

    pub fn randomize_layer(&mut self, index: usize, seed: u64) -> Result<()> {
        let n = self.inner.randomizable_layers().len();
        if index >= n {
            return Err(DixError::addressing(format!("randomizable layer {index} out of range ({n})")));
        }
        self.inner.randomize_layer(index, seed)
    }

    pub fn inner(&self) -> &dyn VisionModel {
        self.inner.as_ref()
    }
}
