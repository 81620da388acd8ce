//! Path-integrated attribution at intermediate representations.
//!
//! For a site `l` with captured representation `x` and baseline `z`, the
//! per-element attribution is approximated by the right-endpoint Riemann sum
//!
//! ```text
//! M = (x - z) / N  ∘  Σ_{n=1..N} φ(r(n/N), g(n/N)),    r(t) = z + t (x - z)
//! ```
//!
//! where `g` is the gradient of the class score at the interpolant and `φ` is
//! either `r ∘ g` or `g`. The map at that site is the channel mean of `M`
//! resized to the input resolution. Transformer sites interpolate the
//! attention tensor from zero and use gradient rollout as the integrand.
//! Maps from several sites are aggregated by mean or entrywise product.

mod map;
mod presets;
pub mod resize;

use serde::{Deserialize, Serialize};

use crate::adapters::{LayerId, ModelHandle, SiteKind};
use crate::error::{DixError, Result};
use crate::rollout::{gradient_rollout, RolloutConfig};
use crate::tensor::Tensor;

pub use map::{ExplanationMap, Grid, Provenance};
pub use presets::{explain, explain_normalized, MethodConfig, MethodKind, MethodPreset, ResolvedMethod, SiteChoice};

pub const DEFAULT_STEPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curve {
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSpec {
    pub steps: usize,
    pub curve: Curve,
}

impl Default for PathSpec {
    fn default() -> Self {
        PathSpec {
            steps: DEFAULT_STEPS,
            curve: Curve::Linear,
        }
    }
}

impl PathSpec {
    pub fn with_steps(steps: usize) -> Self {
        PathSpec {
            steps,
            curve: Curve::Linear,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(DixError::config("path needs at least one step"));
        }
        Ok(())
    }
}

/// Reference representation standing in for "missing information".
#[derive(Clone, Debug, PartialEq)]
pub enum BaselineSpec {
    /// Each channel filled with that channel's minimum (activation sites only).
    ChannelMin,
    Zero,
    Custom(Tensor),
}

impl BaselineSpec {
    pub fn describe(&self) -> String {
        match self {
            BaselineSpec::ChannelMin => "channel_min".into(),
            BaselineSpec::Zero => "zero".into(),
            BaselineSpec::Custom(t) => {
                use sha2::{Digest, Sha256};
                let mut bytes = Vec::new();
                t.write_bytes(&mut bytes);
                format!("custom:{}", hex::encode(&Sha256::digest(bytes)[..8]))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phi", rename_all = "snake_case")]
pub enum IntegrandSpec {
    ActivationTimesGradient,
    GradientOnly,
    GradientRollout { rollout: RolloutConfig },
}

impl IntegrandSpec {
    pub fn gradient_rollout() -> Self {
        IntegrandSpec::GradientRollout {
            rollout: RolloutConfig::gradient(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    ElementwiseProduct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layers: Vec<LayerId>,
    pub aggregation: Aggregation,
}

pub fn make_baseline(representation: &Tensor, site: SiteKind, spec: &BaselineSpec) -> Result<Tensor> {
    match spec {
        BaselineSpec::Zero => Ok(Tensor::zeros(representation.shape())),
        BaselineSpec::Custom(t) => {
            t.expect_shape(representation.shape())?;
            Ok(t.clone())
        }
        BaselineSpec::ChannelMin => {
            if site != SiteKind::Activation {
                return Err(DixError::config(format!(
                    "channel_min baseline applies to activation sites, not {site:?}"
                )));
            }
            let shape = representation.shape();
            if shape.len() != 3 {
                return Err(DixError::addressing(format!(
                    "channel_min needs (C, H, W), got {shape:?}"
                )));
            }
            let plane = shape[1] * shape[2];
            let mins: Vec<f64> = representation
                .data()
                .chunks(plane)
                .map(|c| c.iter().cloned().fold(f64::INFINITY, f64::min))
                .collect();
            Ok(Tensor::from_fn(shape, |i| mins[i / plane]))
        }
    }
}

/// Point `n/N` along the straight line from `z` to `x`; the endpoints are exact.
pub fn interpolate(x: &Tensor, z: &Tensor, n: usize, steps: usize) -> Result<Tensor> {
    x.expect_shape(z.shape())?;
    if steps == 0 || n > steps {
        return Err(DixError::config(format!("step {n} outside 0..={steps}")));
    }
    if n == steps {
        return Ok(x.clone());
    }
    if n == 0 {
        return Ok(z.clone());
    }
    let t = n as f64 / steps as f64;
    x.zip_map(z, |xv, zv| zv + t * (xv - zv))
}

/// Riemann-sum attribution tensor at one activation or input site, before reduction.
///
/// The input site accepts only the gradient-only integrand, which is
/// integrated gradients.
pub fn layer_attribution(
    model: &mut ModelHandle,
    input: &Tensor,
    class_index: usize,
    layer: LayerId,
    path: &PathSpec,
    baseline: &BaselineSpec,
    integrand: &IntegrandSpec,
) -> Result<Tensor> {
    path.validate()?;
    match (layer.site, integrand) {
        (SiteKind::Attention, _) => {
            return Err(DixError::config(format!(
                "{layer} is an attention site; use dix_layer_map_vit"
            )))
        }
        (_, IntegrandSpec::GradientRollout { .. }) => {
            return Err(DixError::config("gradient rollout only applies to attention sites"))
        }
        (SiteKind::Input, IntegrandSpec::ActivationTimesGradient) => {
            return Err(DixError::config(
                "activation-times-gradient at the input site is not defined here; use integrated_gradients",
            ))
        }
        _ => {}
    }
    let (_, captured) = model.forward_capture(input, &[layer])?;
    let x = &captured[&layer];
    let z = make_baseline(x, layer.site, baseline)?;
    let steps = path.steps;
    let mut total = Tensor::zeros(x.shape());
    for n in 1..=steps {
        let r = interpolate(x, &z, n, steps)?;
        let g = model.grad_at(layer, &r, class_index)?;
        let phi = match integrand {
            IntegrandSpec::ActivationTimesGradient => r.zip_map(&g, |a, b| a * b)?,
            _ => g,
        };
        total.add_assign(&phi);
    }
    let n = steps as f64;
    let h = x.zip_map(&z, |a, b| a - b)?;
    h.zip_map(&total, |hv, s| hv / n * s)
}

/// Mean over the channel axis of a `(C, H, W)` tensor.
pub fn channel_mean(t: &Tensor) -> Result<Grid> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(DixError::addressing(format!("channel mean needs (C, H, W), got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; h * w];
    for plane in t.data().chunks(h * w) {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    Grid::new(h, w, out)
}

fn input_hw(model: &ModelHandle) -> Result<(usize, usize)> {
    let s = model.input_shape();
    if s.len() != 3 {
        return Err(DixError::addressing(format!("model input must be (C, H, W), got {s:?}")));
    }
    Ok((s[1], s[2]))
}

fn resize_grid(g: &Grid, h: usize, w: usize) -> Grid {
    Grid {
        height: h,
        width: w,
        values: resize::bilinear(&g.values, g.height, g.width, h, w),
    }
}

/// Layer map at an activation site: channel mean of the Riemann attribution, resized to the input.
#[allow(clippy::too_many_arguments)]
pub fn dix_layer_map_cnn(
    model: &mut ModelHandle,
    input: &Tensor,
    class_index: usize,
    layer: LayerId,
    path: &PathSpec,
    baseline: &BaselineSpec,
    integrand: &IntegrandSpec,
) -> Result<ExplanationMap> {
    let m = layer_attribution(model, input, class_index, layer, path, baseline, integrand)?;
    let (h, w) = input_hw(model)?;
    let grid = resize_grid(&channel_mean(&m)?, h, w);
    Ok(ExplanationMap {
        grid,
        class_index,
        provenance: Provenance::layer_map(model.model_id(), "dix", *path, baseline, *integrand, layer.index),
    })
}

/// Integrated gradients: the gradient-only Riemann attribution at the input, channel-averaged.
pub fn integrated_gradients(
    model: &mut ModelHandle,
    input: &Tensor,
    class_index: usize,
    path: &PathSpec,
    baseline: &BaselineSpec,
) -> Result<ExplanationMap> {
    let integrand = IntegrandSpec::GradientOnly;
    let m = layer_attribution(model, input, class_index, LayerId::INPUT, path, baseline, &integrand)?;
    Ok(ExplanationMap {
        grid: channel_mean(&m)?,
        class_index,
        provenance: Provenance::layer_map(model.model_id(), "ig", *path, baseline, integrand, 0),
    })
}

/// Patch grids of the `N` interpolation steps at an attention site.
///
/// Step `n` scales the captured attention of `block` by `n/N`, replays the
/// forward pass with that substitution, and applies gradient rollout to the
/// attention and gradients of every block. With the gradient-only integrand
/// the attention factor is dropped and only the gradients are rolled out.
pub fn vit_step_grids(
    model: &mut ModelHandle,
    input: &Tensor,
    class_index: usize,
    block: LayerId,
    path: &PathSpec,
    integrand: &IntegrandSpec,
) -> Result<Vec<crate::rollout::PatchGrid>> {
    path.validate()?;
    if block.site != SiteKind::Attention {
        return Err(DixError::config(format!("{block} is not an attention site")));
    }
    let rollout = match integrand {
        IntegrandSpec::GradientRollout { rollout } => *rollout,
        IntegrandSpec::GradientOnly => RolloutConfig::gradient(),
        IntegrandSpec::ActivationTimesGradient => {
            return Err(DixError::config(
                "attention sites take gradient_rollout or gradient_only integrands",
            ))
        }
    };
    let (_, captured) = model.forward_capture(input, &[block])?;
    let attention = &captured[&block];
    crate::rollout::grid_side(attention.shape()[1])?;
    let zero = Tensor::zeros(attention.shape());
    let mut grids = Vec::with_capacity(path.steps);
    for n in 1..=path.steps {
        let r = interpolate(attention, &zero, n, path.steps)?;
        let pass = model.attention_pass(block, &r, class_index)?;
        let blocks = match integrand {
            IntegrandSpec::GradientOnly => pass
                .attentions
                .iter()
                .map(|a| Tensor::full(a.shape(), 1.0))
                .collect(),
            _ => pass.attentions,
        };
        grids.push(gradient_rollout(&blocks, &pass.gradients, &rollout)?);
    }
    Ok(grids)
}

/// Layer map at an attention site: mean of the per-step rollout grids, resized to the input.
pub fn dix_layer_map_vit(
    model: &mut ModelHandle,
    input: &Tensor,
    class_index: usize,
    block: LayerId,
    path: &PathSpec,
    integrand: &IntegrandSpec,
) -> Result<ExplanationMap> {
    let grids = vit_step_grids(model, input, class_index, block, path, integrand)?;
    let side = grids[0].side;
    let mut mean = vec![0.0; side * side];
    for g in &grids {
        for (m, v) in mean.iter_mut().zip(&g.values) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= grids.len() as f64);
    let (h, w) = input_hw(model)?;
    let grid = resize_grid(&Grid::new(side, side, mean)?, h, w);
    Ok(ExplanationMap {
        grid,
        class_index,
        provenance: Provenance::layer_map(
            model.model_id(),
            "dix",
            *path,
            &BaselineSpec::Zero,
            *integrand,
            block.index,
        ),
    })
}

/// Combines per-layer maps into one map.
pub fn aggregate(maps: &[ExplanationMap], selection: &LayerSelection) -> Result<ExplanationMap> {
    let first = maps
        .first()
        .ok_or_else(|| DixError::config("cannot aggregate an empty list of maps"))?;
    if maps.len() != selection.layers.len() {
        return Err(DixError::config(format!(
            "{} maps for a selection of {} layers",
            maps.len(),
            selection.layers.len()
        )));
    }
    for m in &maps[1..] {
        first.grid.same_dims(&m.grid)?;
        if m.class_index != first.class_index {
            return Err(DixError::config(format!(
                "maps explain different classes ({} vs {})",
                first.class_index, m.class_index
            )));
        }
    }
    let mut provenance = first.provenance.clone();
    provenance.layers = selection.layers.iter().map(|l| l.index).collect();
    provenance.aggregation = Some(selection.aggregation);
    if maps.len() == 1 {
        return Ok(ExplanationMap {
            grid: first.grid.clone(),
            class_index: first.class_index,
            provenance,
        });
    }
    let mut values = first.grid.values.clone();
    for m in &maps[1..] {
        for (acc, v) in values.iter_mut().zip(&m.grid.values) {
            match selection.aggregation {
                Aggregation::Mean => *acc += v,
                Aggregation::ElementwiseProduct => *acc *= v,
            }
        }
    }
    if selection.aggregation == Aggregation::Mean {
        let n = maps.len() as f64;
        values.iter_mut().for_each(|v| *v /= n);
    }
    Ok(ExplanationMap {
        grid: Grid::new(first.grid.height, first.grid.width, values)?,
        class_index: first.class_index,
        provenance,
    })
}

/// Min-max rescaling to `[0, 1]`; constant maps become all-zero.
pub fn normalize_map(map: &ExplanationMap) -> ExplanationMap {
    let values = &map.grid.values;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let normalized = if range > 0.0 && range.is_finite() {
        values.iter().map(|v| (v - min) / range).collect()
    } else {
        vec![0.0; values.len()]
    };
    let mut provenance = map.provenance.clone();
    provenance.normalized = true;
    ExplanationMap {
        grid: Grid {
            height: map.grid.height,
            width: map.grid.width,
            values: normalized,
        },
        class_index: map.class_index,
        provenance,
    }
}
