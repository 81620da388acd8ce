//! Evaluation protocols for explanation maps.
//!
//! All protocols consume min-max-normalized maps whose grid matches the
//! spatial dimensions of the image they explain.

mod confidence;
mod information;
mod perturbation;
mod segmentation;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::ExplanationMap;
use crate::error::{DixError, Result};
use crate::tensor::Tensor;

pub use confidence::{adp, confidence_pairs, pic};
pub use information::{
    aic_sic, blur_series, compressed_size, gaussian_blur, information_level, BlurConfig, BlurSeries, InfoCurveConfig,
    COMPRESSOR,
};
pub use perturbation::{
    perturbation_curve, perturbation_report, removal_schedule, trapezoid_with_flat_ends, Order, PerturbationCurve,
    PerturbationMetric, Track, DEFAULT_FRACTIONS,
};
pub use segmentation::{segmentation_report, segmentation_scores, Mask, SegmentationScores};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricName {
    #[serde(rename = "NEG")]
    Neg,
    #[serde(rename = "POS")]
    Pos,
    #[serde(rename = "INS")]
    Ins,
    #[serde(rename = "DEL")]
    Del,
    #[serde(rename = "ADP")]
    Adp,
    #[serde(rename = "PIC")]
    Pic,
    #[serde(rename = "AIC")]
    Aic,
    #[serde(rename = "SIC")]
    Sic,
    #[serde(rename = "PA")]
    Pa,
    #[serde(rename = "mAP")]
    MAp,
    #[serde(rename = "mIoU")]
    MIoU,
    #[serde(rename = "mF1")]
    MF1,
}

impl MetricName {
    pub const ALL: [MetricName; 12] = [
        MetricName::Neg,
        MetricName::Pos,
        MetricName::Ins,
        MetricName::Del,
        MetricName::Adp,
        MetricName::Pic,
        MetricName::Aic,
        MetricName::Sic,
        MetricName::Pa,
        MetricName::MAp,
        MetricName::MIoU,
        MetricName::MF1,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricName::Neg => "NEG",
            MetricName::Pos => "POS",
            MetricName::Ins => "INS",
            MetricName::Del => "DEL",
            MetricName::Adp => "ADP",
            MetricName::Pic => "PIC",
            MetricName::Aic => "AIC",
            MetricName::Sic => "SIC",
            MetricName::Pa => "PA",
            MetricName::MAp => "mAP",
            MetricName::MIoU => "mIoU",
            MetricName::MF1 => "mF1",
        }
    }

    pub fn is_segmentation(&self) -> bool {
        matches!(self, MetricName::Pa | MetricName::MAp | MetricName::MIoU | MetricName::MF1)
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = DixError;

    fn from_str(s: &str) -> Result<Self> {
        MetricName::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                DixError::config(format!(
                    "unknown metric {s:?}; expected one of {}",
                    MetricName::ALL.map(|m| m.as_str()).join(", ")
                ))
            })
    }
}

/// One metric over a set of images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricName,
    pub value: f64,
    /// Per-image values. For AIC/SIC these are per-image curve means; `value`
    /// comes from the binned curve.
    pub per_item: Vec<f64>,
    /// `(information level, mean)` points for AIC/SIC.
    pub curve: Vec<(f64, f64)>,
    /// Indices of images left out of the aggregate.
    pub skipped: Vec<usize>,
    pub notes: Vec<String>,
    pub config_digest: String,
}

impl MetricReport {
    pub(crate) fn mean_of(metric: MetricName, per_item: Vec<f64>, config_digest: String) -> Self {
        MetricReport {
            metric,
            value: mean(&per_item),
            per_item,
            curve: Vec::new(),
            skipped: Vec::new(),
            notes: Vec::new(),
            config_digest,
        }
    }

    pub fn n_items(&self) -> usize {
        self.per_item.len()
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Short hex SHA-256 of a protocol description.
pub fn protocol_digest<T: Serialize>(protocol: &T) -> String {
    let bytes = serde_json::to_vec(protocol).expect("protocol serializes");
    hex::encode(&Sha256::digest(bytes)[..8])
}

pub(crate) fn check_normalized(map: &ExplanationMap) -> Result<()> {
    if let Some(v) = map.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DixError::config(format!(
            "map must be normalized to [0, 1]; found value {v}"
        )));
    }
    Ok(())
}

/// Checks that `map` covers the spatial grid of a `(C, H, W)` image.
pub(crate) fn check_pair(image: &Tensor, map: &ExplanationMap) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(DixError::addressing(format!("image must be (C, H, W), got {s:?}")));
    }
    if map.dims() != (s[1], s[2]) {
        return Err(DixError::addressing(format!(
            "map is {}x{} but image is {}x{}",
            map.dims().0,
            map.dims().1,
            s[1],
            s[2]
        )));
    }
    check_normalized(map)
}

pub(crate) fn check_sets(images: &[Tensor], maps: &[ExplanationMap]) -> Result<()> {
    if images.is_empty() {
        return Err(DixError::config("metric needs at least one image"));
    }
    if images.len() != maps.len() {
        return Err(DixError::config(format!(
            "{} images paired with {} maps",
            images.len(),
            maps.len()
        )));
    }
    images.iter().zip(maps).try_for_each(|(i, m)| check_pair(i, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_names_parse() {
        for m in MetricName::ALL {
            assert_eq!(m.as_str().parse::<MetricName>().unwrap(), m);
        }
        assert!("FOO".parse::<MetricName>().is_err());
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = protocol_digest(&serde_json::json!({"grid": [0.0, 0.1]}));
        assert_eq!(a, protocol_digest(&serde_json::json!({"grid": [0.0, 0.1]})));
        assert_ne!(a, protocol_digest(&serde_json::json!({"grid": [0.0, 0.2]})));
        assert_eq!(a.len(), 16);
    }
}
