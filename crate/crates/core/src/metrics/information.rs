//! Blur-and-reveal information curves (AIC, SIC).
//!
//! The information level of an image is its losslessly compressed size
//! relative to the original. Images are quantized to 8 bits with the
//! original's value range, each row is delta-coded (left neighbour), and the
//! bytes are deflated at level 9.

use std::io::Write;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::perturbation::{count_for, trapezoid_with_flat_ends};
use super::{check_pair, check_sets, protocol_digest, MetricName, MetricReport};
use crate::adapters::ModelHandle;
use crate::attribution::ExplanationMap;
use crate::error::{DixError, Result};
use crate::tensor::Tensor;

pub const COMPRESSOR: &str = "u8-quantize/row-delta/deflate-9 (flate2 1)";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurConfig {
    pub sigma: f64,
    pub radius: usize,
}

impl Default for BlurConfig {
    fn default() -> Self {
        BlurConfig { sigma: 3.0, radius: 9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoCurveConfig {
    pub reveal_grid: Vec<f64>,
    pub bins: usize,
    pub blur: BlurConfig,
}

impl Default for InfoCurveConfig {
    fn default() -> Self {
        InfoCurveConfig {
            reveal_grid: (0..=20).map(|k| k as f64 / 20.0).collect(),
            bins: 10,
            blur: BlurConfig::default(),
        }
    }
}

impl InfoCurveConfig {
    fn validate(&self) -> Result<()> {
        check_reveal_grid(&self.reveal_grid)?;
        if self.bins == 0 {
            return Err(DixError::config("information curves need at least one bin"));
        }
        Ok(())
    }
}

fn check_reveal_grid(grid: &[f64]) -> Result<()> {
    if grid.first() != Some(&0.0) || grid.last() != Some(&1.0) {
        return Err(DixError::config(format!(
            "reveal grid must start at 0 and end at 1: {grid:?}"
        )));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DixError::config(format!("reveal grid must be strictly increasing: {grid:?}")));
    }
    Ok(())
}

/// Separable Gaussian low-pass per channel with clamped edges.
pub fn gaussian_blur(image: &Tensor, config: &BlurConfig) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(DixError::addressing(format!("image must be (C, H, W), got {s:?}")));
    }
    if !(config.sigma > 0.0) {
        return Err(DixError::config(format!("blur sigma must be positive, got {}", config.sigma)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let r = config.radius as isize;
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * config.sigma * config.sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let xx = clamp(x as isize + j as isize - r, w);
                    acc += k * src[(ch * h + y) * w + xx];
                }
                tmp[(ch * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let yy = clamp(y as isize + j as isize - r, h);
                    acc += k * tmp[(ch * h + yy) * w + x];
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Compressed byte count of `image`, quantized over `[lo, hi]`.
pub fn compressed_size(image: &Tensor, lo: f64, hi: f64) -> usize {
    let s = image.shape();
    let w = s.last().copied().unwrap_or(1).max(1);
    let range = hi - lo;
    let q: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| {
            if range > 0.0 {
                (255.0 * (v - lo) / range).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    let mut coded = Vec::with_capacity(q.len());
    for row in q.chunks(w) {
        let mut prev = 0u8;
        for &b in row {
            coded.push(b.wrapping_sub(prev));
            prev = b;
        }
    }
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(9));
    enc.write_all(&coded).expect("in-memory write");
    enc.finish().expect("in-memory write").len()
}

fn value_range(t: &Tensor) -> (f64, f64) {
    t.data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Compressed size of `current` between that of the fully blurred image (0) and the original (1), clipped.
pub fn information_level(current: &Tensor, original: &Tensor, blurred: &Tensor) -> Result<f64> {
    current.expect_shape(original.shape())?;
    blurred.expect_shape(original.shape())?;
    let (lo, hi) = value_range(original);
    let full = compressed_size(original, lo, hi) as f64;
    let floor = compressed_size(blurred, lo, hi) as f64;
    if full <= floor {
        return Ok(if compressed_size(current, lo, hi) as f64 >= full { 1.0 } else { 0.0 });
    }
    Ok(((compressed_size(current, lo, hi) as f64 - floor) / (full - floor)).clamp(0.0, 1.0))
}

/// Images revealed progressively over a blurred base.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurSeries {
    pub reveal_fractions: Vec<f64>,
    pub images: Vec<Tensor>,
    /// Running maximum of the raw levels, so the sequence is nondecreasing.
    pub information_levels: Vec<f64>,
}

/// Restores the top-`f` pixels by map value (ties row-major) over the blurred image.
pub fn blur_series(image: &Tensor, map: &ExplanationMap, reveal_grid: &[f64], blur: &BlurConfig) -> Result<BlurSeries> {
    check_pair(image, map)?;
    check_reveal_grid(reveal_grid)?;
    let s = image.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let order = super::removal_schedule(map, super::Order::Descending);
    let blurred = gaussian_blur(image, blur)?;
    let mut current = blurred.clone();
    let mut revealed = 0;
    let mut images = Vec::with_capacity(reveal_grid.len());
    let mut levels = Vec::with_capacity(reveal_grid.len());
    let mut running: f64 = 0.0;
    for &f in reveal_grid {
        let target = count_for(f, plane);
        for &p in &order[revealed..target] {
            for ch in 0..c {
                current.data_mut()[ch * plane + p] = image.data()[ch * plane + p];
            }
        }
        revealed = target;
        running = running.max(information_level(&current, image, &blurred)?);
        levels.push(running);
        images.push(current.clone());
    }
    Ok(BlurSeries {
        reveal_fractions: reveal_grid.to_vec(),
        images,
        information_levels: levels,
    })
}

struct Observation {
    level: f64,
    correct: f64,
    softmax_info: f64,
}

fn observe(model: &mut ModelHandle, image: &Tensor, map: &ExplanationMap, cfg: &InfoCurveConfig) -> Result<Vec<Observation>> {
    let k = model.class_count();
    let original = model.forward(image)?;
    let top = original.top_class();
    let p0 = original.probability(top);
    let series = blur_series(image, map, &cfg.reveal_grid, &cfg.blur)?;
    series
        .images
        .iter()
        .zip(&series.information_levels)
        .map(|(img, &level)| {
            let pred = model.forward(img)?;
            let p = pred.probability(top);
            let info = 1.0 - (p0.ln() - p.ln()) / (k as f64).ln();
            Ok(Observation {
                level,
                correct: f64::from(u8::from(pred.top_class() == top)),
                softmax_info: if info.is_nan() { 0.0 } else { info.clamp(0.0, 1.0) },
            })
        })
        .collect()
}

fn binned_area(observations: &[(f64, f64)], bins: usize, report: &mut MetricReport) {
    let mut sums = vec![(0.0, 0usize); bins];
    for &(level, v) in observations {
        let b = ((level * bins as f64).floor() as usize).min(bins - 1);
        sums[b].0 += v;
        sums[b].1 += 1;
    }
    let mut empty = Vec::new();
    for (b, &(sum, n)) in sums.iter().enumerate() {
        if n == 0 {
            empty.push(b);
        } else {
            report.curve.push(((b as f64 + 0.5) / bins as f64, sum / n as f64));
        }
    }
    if !empty.is_empty() {
        report.notes.push(format!("empty information bins dropped: {empty:?}"));
    }
    report.value = trapezoid_with_flat_ends(&report.curve);
}

/// Accuracy and softmax-information areas over information level.
///
/// Correctness compares against the prediction on the unblurred image. The
/// softmax information of the original top class at probability `p` is
/// `1 - (ln p0 - ln p) / ln K`, clipped to `[0, 1]`, with `p0` the original
/// probability and `K` the class count.
pub fn aic_sic(
    model: &ModelHandle,
    images: &[Tensor],
    maps: &[ExplanationMap],
    cfg: &InfoCurveConfig,
) -> Result<(MetricReport, MetricReport)> {
    cfg.validate()?;
    check_sets(images, maps)?;
    if model.class_count() < 2 {
        return Err(DixError::config("information curves need at least two classes"));
    }
    let per_image = crate::fan_out(model, images.len(), |m, i| observe(m, &images[i], &maps[i], cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let digest = protocol_digest(&serde_json::json!({
        "compressor": COMPRESSOR,
        "blur": cfg.blur,
        "reveal_grid": cfg.reveal_grid,
        "bins": cfg.bins,
        "levels": "running_max_rel_blurred",
        "sic": "1-(ln p0-ln p)/ln K clipped",
        "area": "trapezoid_over_bin_centers_flat_ends",
    }));
    let mut aic = MetricReport::mean_of(MetricName::Aic, Vec::new(), digest.clone());
    let mut sic = MetricReport::mean_of(MetricName::Sic, Vec::new(), digest);
    let flat: Vec<&Observation> = per_image.iter().flatten().collect();
    binned_area(&flat.iter().map(|o| (o.level, o.correct)).collect::<Vec<_>>(), cfg.bins, &mut aic);
    binned_area(&flat.iter().map(|o| (o.level, o.softmax_info)).collect::<Vec<_>>(), cfg.bins, &mut sic);
    aic.per_item = per_image.iter().map(|o| o.iter().map(|x| x.correct).sum::<f64>() / o.len() as f64).collect();
    sic.per_item = per_image
        .iter()
        .map(|o| o.iter().map(|x| x.softmax_info).sum::<f64>() / o.len() as f64)
        .collect();
    Ok((aic, sic))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::Grid;

    fn textured(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| {
            let x = (i % w) as f64;
            let y = ((i / w) % h) as f64;
            ((x * 1.7).sin() * (y * 2.3).cos() + ((i * 7919) % 13) as f64 / 13.0).tanh()
        })
    }

    #[test]
    fn identical_image_has_full_information() {
        let img = textured(16, 16);
        let blurred = gaussian_blur(&img, &BlurConfig::default()).unwrap();
        assert_eq!(information_level(&img, &img, &blurred).unwrap(), 1.0);
    }

    #[test]
    fn blurred_image_has_no_information() {
        let img = textured(16, 16);
        let blurred = gaussian_blur(&img, &BlurConfig::default()).unwrap();
        assert_eq!(information_level(&blurred, &img, &blurred).unwrap(), 0.0);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Tensor::full(&[2, 5, 7], 0.3);
        let b = gaussian_blur(&img, &BlurConfig { sigma: 1.5, radius: 4 }).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn series_ends_at_original() {
        let img = textured(12, 12);
        let map = ExplanationMap::from_grid(Grid::new(12, 12, (0..144).map(|i| i as f64 / 143.0).collect()).unwrap(), 0);
        let grid = InfoCurveConfig::default().reveal_grid;
        let s = blur_series(&img, &map, &grid, &BlurConfig::default()).unwrap();
        assert_eq!(s.images.last().unwrap(), &img);
        assert_eq!(*s.information_levels.last().unwrap(), 1.0);
        assert!(s.information_levels.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn reveal_grid_must_cover_unit_interval() {
        let img = textured(4, 4);
        let map = ExplanationMap::from_grid(Grid::zeros(4, 4), 0);
        assert!(matches!(
            blur_series(&img, &map, &[0.0, 0.5, 0.9], &BlurConfig::default()),
            Err(DixError::Configuration(_))
        ));
    }
}
