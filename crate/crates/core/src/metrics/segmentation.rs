//! Pixel accuracy, mIoU, mF1 and average precision against binary masks.

use serde::{Deserialize, Serialize};

use super::{check_normalized, mean, protocol_digest, MetricName, MetricReport};
use crate::attribution::ExplanationMap;
use crate::error::{DixError, Result};

/// Binary ground truth, row-major; `true` is foreground.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(DixError::addressing(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Mask { height, width, values })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub pa: f64,
    pub miou: f64,
    pub mf1: f64,
    /// `None` when the ground truth has no foreground.
    pub ap: Option<f64>,
    /// Ground-truth classes absent from the mask, skipped in the class means.
    pub absent: Vec<String>,
}

fn class_scores(pred: &[bool], gt: &[bool], class: bool) -> (f64, f64) {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == class, g == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    let iou = tp as f64 / (tp + fp + fnn) as f64;
    let f1 = 2.0 * tp as f64 / (2 * tp + fp + fnn) as f64;
    (iou, f1)
}

fn average_precision(map: &ExplanationMap, gt: &[bool]) -> Option<f64> {
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return None;
    }
    let v = map.values();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in idx.iter().enumerate() {
        if gt[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

/// Scores a normalized map against a mask; foreground = value above the map's mean.
pub fn segmentation_scores(map: &ExplanationMap, ground_truth: &Mask) -> Result<SegmentationScores> {
    if map.dims() != (ground_truth.height, ground_truth.width) {
        return Err(DixError::addressing(format!(
            "map is {:?} but mask is {}x{}",
            map.dims(),
            ground_truth.height,
            ground_truth.width
        )));
    }
    check_normalized(map)?;
    let threshold = mean(map.values());
    let pred: Vec<bool> = map.values().iter().map(|&v| v > threshold).collect();
    let gt = &ground_truth.values;
    let matches = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    let pa = matches as f64 / gt.len() as f64;
    let mut ious = Vec::new();
    let mut f1s = Vec::new();
    let mut absent = Vec::new();
    for (class, label) in [(true, "foreground"), (false, "background")] {
        if gt.contains(&class) {
            let (iou, f1) = class_scores(&pred, gt, class);
            ious.push(iou);
            f1s.push(f1);
        } else {
            absent.push(label.to_string());
        }
    }
    Ok(SegmentationScores {
        pa,
        miou: mean(&ious),
        mf1: mean(&f1s),
        ap: average_precision(map, gt),
        absent,
    })
}

/// PA, mAP, mIoU and mF1 averaged over images.
pub fn segmentation_report(maps: &[ExplanationMap], masks: &[Mask]) -> Result<[MetricReport; 4]> {
    if maps.is_empty() || maps.len() != masks.len() {
        return Err(DixError::config(format!(
            "segmentation needs matching nonempty map and mask lists ({} vs {})",
            maps.len(),
            masks.len()
        )));
    }
    let scores = maps
        .iter()
        .zip(masks)
        .map(|(m, g)| segmentation_scores(m, g))
        .collect::<Result<Vec<_>>>()?;
    let digest = protocol_digest(&serde_json::json!({
        "threshold": "strictly_above_map_mean",
        "classes": ["foreground", "background"],
        "ap_ranking": "raw_values_desc_row_major_ties",
    }));
    let pick = |name: MetricName, f: &dyn Fn(&SegmentationScores) -> f64| {
        MetricReport::mean_of(name, scores.iter().map(f).collect(), digest.clone())
    };
    let mut ap = MetricReport::mean_of(MetricName::MAp, Vec::new(), digest.clone());
    for (i, s) in scores.iter().enumerate() {
        match s.ap {
            Some(v) => ap.per_item.push(v),
            None => ap.skipped.push(i),
        }
    }
    ap.value = mean(&ap.per_item);
    if !ap.skipped.is_empty() {
        ap.notes.push(format!("{} masks without foreground skipped", ap.skipped.len()));
    }
    let mut miou = pick(MetricName::MIoU, &|s| s.miou);
    let mut mf1 = pick(MetricName::MF1, &|s| s.mf1);
    let flagged = scores.iter().filter(|s| !s.absent.is_empty()).count();
    if flagged > 0 {
        let note = format!("{flagged} masks contain a single class; the absent class is skipped in the class mean");
        miou.notes.push(note.clone());
        mf1.notes.push(note);
    }
    Ok([pick(MetricName::Pa, &|s| s.pa), ap, miou, mf1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::Grid;

    fn map(h: usize, w: usize, v: &[f64]) -> ExplanationMap {
        ExplanationMap::from_grid(Grid::new(h, w, v.to_vec()).unwrap(), 0)
    }

    #[test]
    fn two_by_two_enumeration() {
        let gt = Mask::new(2, 2, vec![true, false, true, false]).unwrap();
        let m = map(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let s = segmentation_scores(&m, &gt).unwrap();
        assert_eq!(s.pa, 0.5);
        assert!((s.miou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.mf1, 0.5);
    }

    #[test]
    fn perfect_and_complement() {
        let gt = Mask::new(2, 3, vec![true, false, false, true, true, false]).unwrap();
        let perfect = map(2, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let s = segmentation_scores(&perfect, &gt).unwrap();
        assert_eq!((s.pa, s.miou, s.mf1, s.ap), (1.0, 1.0, 1.0, Some(1.0)));
        let inverse = map(2, 3, &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(segmentation_scores(&inverse, &gt).unwrap().pa, 0.0);
    }

    #[test]
    fn single_class_mask_flags_absent_class() {
        let gt = Mask::new(1, 2, vec![true, true]).unwrap();
        let s = segmentation_scores(&map(1, 2, &[1.0, 0.0]), &gt).unwrap();
        assert_eq!(s.absent, vec!["background".to_string()]);
        assert_eq!(s.miou, 0.5);
        let empty = Mask::new(1, 2, vec![false, false]).unwrap();
        assert_eq!(segmentation_scores(&map(1, 2, &[1.0, 0.0]), &empty).unwrap().ap, None);
    }

    #[test]
    fn dimension_mismatch() {
        let gt = Mask::new(2, 2, vec![true; 4]).unwrap();
        assert!(matches!(
            segmentation_scores(&map(1, 4, &[0.0; 4]), &gt),
            Err(DixError::Addressing(_))
        ));
    }
}
