//! Heatmap overlays as PNG.
//!
//! Each pixel blends as `(1 - a*v) * image + a*v * colormap(v)` for map value
//! `v` and alpha `a`, so zero heat leaves the image untouched.

use crate::attribution::ExplanationMap;
use crate::error::{DixError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Colormap {
    /// Black, red, yellow, white.
    Heat,
    Jet,
}

impl Colormap {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "heat" => Ok(Colormap::Heat),
            "jet" => Ok(Colormap::Jet),
            _ => Err(DixError::config(format!("unknown colormap {name:?}; expected heat or jet"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Colormap::Heat => "heat",
            Colormap::Jet => "jet",
        }
    }

    pub fn color(&self, v: f64) -> [f64; 3] {
        let c = |x: f64| x.clamp(0.0, 1.0);
        match self {
            Colormap::Heat => [c(3.0 * v), c(3.0 * v - 1.0), c(3.0 * v - 2.0)],
            Colormap::Jet => [
                c(1.5 - (4.0 * v - 3.0).abs()),
                c(1.5 - (4.0 * v - 2.0).abs()),
                c(1.5 - (4.0 * v - 1.0).abs()),
            ],
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB8 pixels of a `(1 | 3, H, W)` image with values in `[0, 1]`.
pub fn image_rgb8(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(DixError::addressing(format!("overlay image must be (1|3, H, W), got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = image.data();
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            let src = if s[0] == 1 { 0 } else { ch };
            out.push(to_u8(d[src * plane + p]));
        }
    }
    Ok(out)
}

pub fn render_overlay(image: &Tensor, map: &ExplanationMap, alpha: f64, colormap: Colormap) -> Result<Vec<u8>> {
    let base = image_rgb8(image)?;
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    if map.dims() != (h, w) {
        return Err(DixError::addressing(format!(
            "map is {}x{} but image is {h}x{w}",
            map.dims().0,
            map.dims().1
        )));
    }
    crate::metrics::check_normalized(map)?;
    let plane = h * w;
    let d = image.data();
    let mut pixels = base;
    for (p, &v) in map.values().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let k = alpha * v;
        let color = colormap.color(v);
        for ch in 0..3 {
            let src = if s[0] == 1 { 0 } else { ch };
            let x = d[src * plane + p].clamp(0.0, 1.0);
            pixels[3 * p + ch] = to_u8((1.0 - k) * x + k * color[ch]);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk("alpha".into(), format!("{alpha}"))
            .map_err(|e| DixError::config(e.to_string()))?;
        enc.add_text_chunk("colormap".into(), colormap.name().into())
            .map_err(|e| DixError::config(e.to_string()))?;
        let mut writer = enc.write_header().map_err(|e| DixError::config(e.to_string()))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| DixError::config(e.to_string()))?;
    }
    Ok(out)
}
