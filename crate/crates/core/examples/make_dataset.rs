//! Writes a small PNG dataset in the layout `dixray` reads:
//!
//! ```text
//! cargo run --release --example make_dataset -- <out_dir> [n_images] [seed]
//! ```
//!
//! Images are the 8x8 synthetic blob classes used by the reference models.
//! Masks mark pixels within 1.5 of the class's nominal blob center.

use std::path::PathBuf;

use dixray::sanity::{synthetic_dataset, SYNTHETIC_CLASSES, SYNTHETIC_SHAPE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().ok_or("usage: make_dataset <out_dir> [n_images] [seed]")?);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("masks"))?;
    let [_, h, w] = SYNTHETIC_SHAPE;
    let mut manifest = csv::Writer::from_path(out.join("manifest.csv"))?;
    manifest.write_record(["path", "label", "split"])?;
    for (i, (x, label)) in synthetic_dataset(0, n, seed).test.into_iter().enumerate() {
        let stem = format!("img{i:04}");
        let d = x.data();
        let img = image::RgbImage::from_fn(w as u32, h as u32, |px, py| {
            let p = py as usize * w + px as usize;
            image::Rgb([0, 1, 2].map(|c| (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        img.save(out.join("images").join(format!("{stem}.png")))?;
        let angle = std::f64::consts::TAU * label as f64 / SYNTHETIC_CLASSES as f64;
        let (cy, cx) = (3.5 + 2.5 * angle.sin(), 3.5 + 2.5 * angle.cos());
        let mask = image::GrayImage::from_fn(w as u32, h as u32, |px, py| {
            let r2 = (py as f64 - cy).powi(2) + (px as f64 - cx).powi(2);
            image::Luma([if r2 <= 2.25 { 255 } else { 0 }])
        });
        mask.save(out.join("masks").join(format!("{stem}.png")))?;
        manifest.write_record([format!("{stem}.png"), label.to_string(), "test".into()])?;
    }
    manifest.flush()?;
    println!("wrote {n} images to {}", out.display());
    Ok(())
}
