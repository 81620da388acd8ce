//! Independent oracles shared by the integration suites and the acceptance target.
#![allow(dead_code)]

use dixray::adapters::{AnalyticModel, LayerId, ModelHandle, SiteKind};
use dixray::attribution::{
    layer_attribution, make_baseline, BaselineSpec, ExplanationMap, Grid, IntegrandSpec, PathSpec,
};
use dixray::metrics::{perturbation_report, PerturbationMetric, DEFAULT_FRACTIONS};
use dixray::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen::<f64>())
}

pub fn normal_ish(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `||g - fd||_inf / max(||fd||_inf, 1e-8)` of one probe, full central-difference gradient.
pub fn fd_relative_error(model: &mut ModelHandle, input: &Tensor, layer: LayerId, class: usize, h: f64) -> f64 {
    let (_, captured) = model.forward_capture(input, &[layer]).unwrap();
    let rep = if layer.site == SiteKind::Input { input.clone() } else { captured[&layer].clone() };
    let g = model.grad_at(layer, &rep, class).unwrap();
    let mut fd = vec![0.0; rep.len()];
    for (i, slot) in fd.iter_mut().enumerate() {
        let mut plus = rep.clone();
        plus.data_mut()[i] += h;
        let mut minus = rep.clone();
        minus.data_mut()[i] -= h;
        let fp = model.forward_from(layer, &plus).unwrap().scores[class];
        let fm = model.forward_from(layer, &minus).unwrap().scores[class];
        *slot = (fp - fm) / (2.0 * h);
    }
    let diff = g.data().iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
    diff / scale
}

/// Largest FD relative error over `probes` probes cycling through every site and class.
pub fn fd_max_error(model: &mut ModelHandle, probes: usize, seed: u64) -> f64 {
    let layers = model.layer_ids();
    let shape = model.input_shape();
    let k = model.class_count();
    (0..probes)
        .map(|p| {
            let input = uniform(&shape, seed.wrapping_mul(1000) + p as u64);
            fd_relative_error(model, &input, layers[p % layers.len()], p % k, 1e-3)
        })
        .fold(0.0, f64::max)
}

/// Relative completeness gap of the pre-reduction map at `layer` with the gradient-only integrand.
pub fn completeness_error(
    model: &mut ModelHandle,
    input: &Tensor,
    class: usize,
    layer: LayerId,
    steps: usize,
    baseline: &BaselineSpec,
) -> f64 {
    let (_, captured) = model.forward_capture(input, &[layer]).unwrap();
    let x = if layer.site == SiteKind::Input { input.clone() } else { captured[&layer].clone() };
    let z = make_baseline(&x, layer.site, baseline).unwrap();
    let fx = model.forward_from(layer, &x).unwrap().scores[class];
    let fz = model.forward_from(layer, &z).unwrap().scores[class];
    let m = layer_attribution(
        model,
        input,
        class,
        layer,
        &PathSpec::with_steps(steps),
        baseline,
        &IntegrandSpec::GradientOnly,
    )
    .unwrap();
    (m.sum() - (fx - fz)).abs() / (fx - fz).abs()
}

/// Channel mean of `w ∘ (x - z)` for a `(C, H, W)` weight row.
pub fn linear_ig_oracle(w: &[f64], x: &Tensor, z: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let plane = s[1] * s[2];
    (0..plane)
        .map(|p| (0..s[0]).map(|c| { let i = c * plane + p; w[i] * (x.data()[i] - z.data()[i]) }).sum::<f64>() / s[0] as f64)
        .collect()
}

/// Corner-aligned bilinear resize.
pub fn bilinear_oracle(v: &[f64], ih: usize, iw: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_out: usize, n_in: usize| -> f64 {
        if n_out == 1 { 0.0 } else { o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64 }
    };
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        let y = coord(r, oh, ih);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(ih - 1);
        for c in 0..ow {
            let x = coord(c, ow, iw);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(iw - 1);
            let at = |yy: usize, xx: usize| v[yy * iw + xx];
            out.push(
                (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1)),
            );
        }
    }
    out
}

/// Head mean of `A ∘ G` plus identity, multiplied later-block-on-the-left; CLS row without CLS.
pub fn gradient_rollout_oracle(attentions: &[Tensor], gradients: &[Tensor]) -> Vec<f64> {
    let t = attentions[0].shape()[1];
    let mut acc = DMatrix::<f64>::identity(t, t);
    for (a, g) in attentions.iter().zip(gradients) {
        let heads = a.shape()[0];
        let mut m = DMatrix::<f64>::identity(t, t);
        for h in 0..heads {
            for i in 0..t {
                for j in 0..t {
                    let idx = h * t * t + i * t + j;
                    m[(i, j)] += a.data()[idx] * g.data()[idx] / heads as f64;
                }
            }
        }
        acc = m * acc;
    }
    (1..t).map(|j| acc[(0, j)]).collect()
}

/// Oracle for one DIX layer map on a transformer: per-step rollout grids, averaged, resized.
pub fn vit_layer_map_oracle(model: &mut ModelHandle, input: &Tensor, class: usize, block: LayerId, steps: usize) -> Vec<f64> {
    let (_, captured) = model.forward_capture(input, &[block]).unwrap();
    let x = captured[&block].clone();
    let t = x.shape()[1];
    let side = ((t - 1) as f64).sqrt() as usize;
    let mut mean = vec![0.0; t - 1];
    for n in 1..=steps {
        let rep = x.scale(n as f64 / steps as f64);
        let pass = model.attention_pass(block, &rep, class).unwrap();
        for (m, v) in mean.iter_mut().zip(gradient_rollout_oracle(&pass.attentions, &pass.gradients)) {
            *m += v / steps as f64;
        }
    }
    let s = model.input_shape();
    bilinear_oracle(&mean, side, side, s[1], s[2])
}

pub const PLANTED_SHAPE: [usize; 3] = [3, 8, 8];
pub const PLANTED_BIAS: f64 = 18.0;

/// Two-class affine model: class 1 sums the top-left quadrant, class 0 is the constant 18.
pub fn planted_model() -> ModelHandle {
    let [c, h, w] = PLANTED_SHAPE;
    let n = c * h * w;
    let quadrant: Vec<f64> = (0..n)
        .map(|i| {
            let (y, x) = ((i / w) % h, i % w);
            if y < h / 2 && x < w / 2 { 1.0 } else { 0.0 }
        })
        .collect();
    let model = AnalyticModel::affine(vec![vec![0.0; n], quadrant], vec![PLANTED_BIAS, 0.0], &PLANTED_SHAPE).unwrap();
    ModelHandle::new("planted", Box::new(model)).unwrap()
}

pub fn quadrant_map(inverted: bool) -> ExplanationMap {
    let [_, h, w] = PLANTED_SHAPE;
    let values = (0..h * w)
        .map(|p| {
            let inside = p / w < h / 2 && p % w < w / 2;
            if inside != inverted { 1.0 } else { 0.0 }
        })
        .collect();
    ExplanationMap::from_grid(Grid::new(h, w, values).unwrap(), 1)
}

/// Per-metric outcome of oracle-vs-inverted on one seeded fixture: NEG, POS, INS, DEL.
pub fn planted_dominance(seed: u64) -> [bool; 4] {
    let model = planted_model();
    let image = uniform(&PLANTED_SHAPE, seed);
    let score = |map: ExplanationMap, metric| {
        perturbation_report(&model, std::slice::from_ref(&image), &[map], metric, &DEFAULT_FRACTIONS)
            .unwrap()
            .value
    };
    let pair = |metric| (score(quadrant_map(false), metric), score(quadrant_map(true), metric));
    let (neg_o, neg_i) = pair(PerturbationMetric::Neg);
    let (pos_o, pos_i) = pair(PerturbationMetric::Pos);
    let (ins_o, ins_i) = pair(PerturbationMetric::Ins);
    let (del_o, del_i) = pair(PerturbationMetric::Del);
    [neg_o >= neg_i, pos_o <= pos_i, ins_o >= ins_i, del_o <= del_i]
}

/// Writes `n` synthetic 8x8 PNGs, masks around each class center and a manifest under `root`.
pub fn write_dataset(root: &std::path::Path, n: usize, seed: u64) {
    use dixray::sanity::{synthetic_dataset, SYNTHETIC_CLASSES};
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("masks")).unwrap();
    let mut manifest = String::from("path,label,split\n");
    for (i, (x, label)) in synthetic_dataset(0, n, seed).test.into_iter().enumerate() {
        let stem = format!("img{i:03}");
        let d = x.data();
        let img = image::RgbImage::from_fn(8, 8, |px, py| {
            let p = (py * 8 + px) as usize;
            image::Rgb([0, 1, 2].map(|c| (d[c * 64 + p].clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        img.save(root.join("images").join(format!("{stem}.png"))).unwrap();
        let angle = std::f64::consts::TAU * label as f64 / SYNTHETIC_CLASSES as f64;
        let (cy, cx) = (3.5 + 2.5 * angle.sin(), 3.5 + 2.5 * angle.cos());
        let mask = image::GrayImage::from_fn(8, 8, |px, py| {
            let r2 = (py as f64 - cy).powi(2) + (px as f64 - cx).powi(2);
            image::Luma([if r2 <= 2.25 { 255 } else { 0 }])
        });
        mask.save(root.join("masks").join(format!("{stem}.png"))).unwrap();
        manifest.push_str(&format!("{stem}.png,{},test\n", label % 5));
    }
    std::fs::write(root.join("manifest.csv"), manifest).unwrap();
}

/// Deterministic evaluate configuration over a dataset at `data` (relative to the config's directory).
pub fn evaluate_toml(output_dir: &str, presets: &[&str]) -> String {
    let presets: Vec<String> = presets.iter().map(|p| format!("{p:?}")).collect();
    format!(
        r#"seed = 7
deterministic = true
output_dir = "{output_dir}"

[[model]]
reference = "tiny_cnn"
seed = 42

[method]
presets = [{}]

[dataset]
path = "data"
limit = 4
"#,
        presets.join(", ")
    )
}
