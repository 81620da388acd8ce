//! Average drop (ADP) and increase in confidence (PIC) under map masking.

use super::{check_sets, protocol_digest, MetricName, MetricReport};
use crate::adapters::ModelHandle;
use crate::attribution::ExplanationMap;
use crate::error::Result;
use crate::tensor::Tensor;

fn masked(image: &Tensor, map: &ExplanationMap) -> Tensor {
    let plane = map.values().len();
    Tensor::from_fn(image.shape(), |i| image.data()[i] * map.values()[i % plane])
}

/// `(p_original, p_masked)` of the originally predicted class, per image.
pub fn confidence_pairs(model: &ModelHandle, images: &[Tensor], maps: &[ExplanationMap]) -> Result<Vec<(f64, f64)>> {
    check_sets(images, maps)?;
    crate::fan_out(model, images.len(), |m, i| {
        let original = m.forward(&images[i])?;
        let top = original.top_class();
        let after = m.forward(&masked(&images[i], &maps[i]))?;
        Ok((original.probability(top), after.probability(top)))
    })
    .into_iter()
    .collect()
}

fn digest(metric: MetricName) -> String {
    protocol_digest(&serde_json::json!({
        "metric": metric,
        "mask": "map_times_image",
        "class": "original_top1",
        "increase": "strict",
    }))
}

/// Mean of `100 * max(0, (p_o - p_m) / p_o)`; images with `p_o = 0` are skipped.
pub fn adp(model: &ModelHandle, images: &[Tensor], maps: &[ExplanationMap]) -> Result<MetricReport> {
    let pairs = confidence_pairs(model, images, maps)?;
    let mut report = MetricReport::mean_of(MetricName::Adp, Vec::new(), digest(MetricName::Adp));
    for (i, (po, pm)) in pairs.into_iter().enumerate() {
        if po > 0.0 {
            report.per_item.push(100.0 * ((po - pm) / po).max(0.0));
        } else {
            report.skipped.push(i);
        }
    }
    if !report.skipped.is_empty() {
        report
            .notes
            .push(format!("{} images with zero original confidence skipped", report.skipped.len()));
    }
    report.value = super::mean(&report.per_item);
    Ok(report)
}

/// Percentage of images whose masked confidence strictly exceeds the original.
pub fn pic(model: &ModelHandle, images: &[Tensor], maps: &[ExplanationMap]) -> Result<MetricReport> {
    let pairs = confidence_pairs(model, images, maps)?;
    let per_item: Vec<f64> = pairs
        .iter()
        .map(|(po, pm)| if pm > po { 100.0 } else { 0.0 })
        .collect();
    Ok(MetricReport::mean_of(MetricName::Pic, per_item, digest(MetricName::Pic)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{make_reference_model, ReferenceKind};
    use crate::attribution::Grid;
    use crate::DixError;

    fn ones(h: usize, w: usize) -> ExplanationMap {
        ExplanationMap::from_grid(Grid::new(h, w, vec![1.0; h * w]).unwrap(), 0)
    }

    #[test]
    fn all_ones_mask_is_optimal() {
        let m = make_reference_model(ReferenceKind::TinyCnn, 1).unwrap();
        let images: Vec<Tensor> = (0..3)
            .map(|k| Tensor::from_fn(&[3, 8, 8], |i| ((i + k) as f64 * 0.3).cos()))
            .collect();
        let maps = vec![ones(8, 8); 3];
        assert_eq!(adp(&m, &images, &maps).unwrap().value, 0.0);
        assert_eq!(pic(&m, &images, &maps).unwrap().value, 0.0);
    }

    #[test]
    fn empty_set_is_configuration_error() {
        let m = make_reference_model(ReferenceKind::TinyCnn, 1).unwrap();
        assert!(matches!(pic(&m, &[], &[]), Err(DixError::Configuration(_))));
    }

    #[test]
    fn unnormalized_map_rejected() {
        let m = make_reference_model(ReferenceKind::TinyCnn, 1).unwrap();
        let img = Tensor::zeros(&[3, 8, 8]);
        let map = ExplanationMap::from_grid(Grid::new(8, 8, vec![2.0; 64]).unwrap(), 0);
        assert!(adp(&m, &[img], &[map]).is_err());
    }
}
