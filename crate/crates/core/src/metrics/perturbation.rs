//! Blackout curves: NEG, POS, INS, DEL.

use serde::{Deserialize, Serialize};

use super::{check_pair, check_sets, protocol_digest, MetricName, MetricReport};
use crate::adapters::ModelHandle;
use crate::attribution::ExplanationMap;
use crate::error::{DixError, Result};
use crate::tensor::Tensor;

/// Removal fractions 0, 0.1, ..., 0.9.
pub const DEFAULT_FRACTIONS: [f64; 10] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

const BLACKOUT: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    /// Lowest map values removed first.
    Ascending,
    Descending,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    /// 1 while the top-1 class equals the unperturbed top-1, else 0.
    ClassMatch,
    /// Softmax probability of the unperturbed top-1 class.
    TopProbability,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbationMetric {
    Neg,
    Pos,
    Ins,
    Del,
}

impl PerturbationMetric {
    pub const ALL: [PerturbationMetric; 4] = [
        PerturbationMetric::Neg,
        PerturbationMetric::Pos,
        PerturbationMetric::Ins,
        PerturbationMetric::Del,
    ];

    pub fn protocol(&self) -> (Order, Track) {
        match self {
            PerturbationMetric::Neg => (Order::Ascending, Track::ClassMatch),
            PerturbationMetric::Pos => (Order::Descending, Track::ClassMatch),
            PerturbationMetric::Ins => (Order::Ascending, Track::TopProbability),
            PerturbationMetric::Del => (Order::Descending, Track::TopProbability),
        }
    }

    pub fn name(&self) -> MetricName {
        match self {
            PerturbationMetric::Neg => MetricName::Neg,
            PerturbationMetric::Pos => MetricName::Pos,
            PerturbationMetric::Ins => MetricName::Ins,
            PerturbationMetric::Del => MetricName::Del,
        }
    }

    pub fn from_name(name: MetricName) -> Option<Self> {
        PerturbationMetric::ALL.into_iter().find(|m| m.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub fractions: Vec<f64>,
    pub values: Vec<f64>,
    /// Mean of `values` over the grid.
    pub auc: f64,
}

impl PerturbationCurve {
    pub fn from_values(fractions: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        check_fractions(&fractions)?;
        if values.len() != fractions.len() {
            return Err(DixError::config(format!(
                "{} values for {} fractions",
                values.len(),
                fractions.len()
            )));
        }
        // offset by the first value so that a constant curve is returned exactly
        let v0 = values.first().copied().unwrap_or(0.0);
        let auc = v0 + values.iter().map(|v| v - v0).sum::<f64>() / values.len() as f64;
        Ok(PerturbationCurve { fractions, values, auc })
    }
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.first() != Some(&0.0) {
        return Err(DixError::config("perturbation grid must start at 0"));
    }
    if fractions.windows(2).any(|w| w[1] <= w[0]) || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(DixError::config(format!(
            "perturbation grid must be strictly increasing within [0, 1]: {fractions:?}"
        )));
    }
    Ok(())
}

/// Pixel indices (row-major) in removal order; equal values keep row-major order.
pub fn removal_schedule(map: &ExplanationMap, order: Order) -> Vec<usize> {
    let v = map.values();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    match order {
        Order::Ascending => idx.sort_by(|&a, &b| v[a].total_cmp(&v[b])),
        Order::Descending => idx.sort_by(|&a, &b| v[b].total_cmp(&v[a])),
    }
    idx
}

pub(crate) fn count_for(fraction: f64, pixels: usize) -> usize {
    ((fraction * pixels as f64) + 1e-9).floor().min(pixels as f64) as usize
}

pub fn perturbation_curve(
    model: &mut ModelHandle,
    image: &Tensor,
    map: &ExplanationMap,
    order: Order,
    track: Track,
    fractions: &[f64],
) -> Result<PerturbationCurve> {
    check_pair(image, map)?;
    check_fractions(fractions)?;
    let s = image.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let original = model.forward(image)?;
    let top = original.top_class();
    let schedule = removal_schedule(map, order);
    let mut current = image.clone();
    let mut removed = 0;
    let mut values = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let target = count_for(f, plane);
        for &p in &schedule[removed..target] {
            for ch in 0..c {
                current.data_mut()[ch * plane + p] = BLACKOUT;
            }
        }
        removed = target;
        let pred = if removed == 0 {
            original.clone()
        } else {
            model.forward(&current)?
        };
        values.push(match track {
            Track::ClassMatch => f64::from(u8::from(pred.top_class() == top)),
            Track::TopProbability => pred.probability(top),
        });
    }
    PerturbationCurve::from_values(fractions.to_vec(), values)
}

/// Mean AUC of one perturbation metric over an image set.
pub fn perturbation_report(
    model: &ModelHandle,
    images: &[Tensor],
    maps: &[ExplanationMap],
    metric: PerturbationMetric,
    fractions: &[f64],
) -> Result<MetricReport> {
    check_sets(images, maps)?;
    let (order, track) = metric.protocol();
    let aucs = crate::fan_out(model, images.len(), |m, i| {
        perturbation_curve(m, &images[i], &maps[i], order, track, fractions).map(|c| c.auc)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let digest = protocol_digest(&serde_json::json!({
        "metric": metric.name(),
        "order": order,
        "track": track,
        "fractions": fractions,
        "blackout": BLACKOUT,
        "tie_break": "row_major",
        "auc": "grid_mean",
    }));
    Ok(MetricReport::mean_of(metric.name(), aucs, digest))
}

/// Area under a piecewise-linear curve through `points` (sorted by x within
/// [0, 1]), held constant from 0 to the first point and from the last point to 1.
pub fn trapezoid_with_flat_ends(points: &[(f64, f64)]) -> f64 {
    let (Some(first), Some(last)) = (points.first(), points.last()) else {
        return f64::NAN;
    };
    let mut area = first.0 * first.1 + (1.0 - last.0) * last.1;
    for w in points.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    area
}
