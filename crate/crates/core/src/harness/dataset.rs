//! Dataset directory layout:
//!
//! ```text
//! root/
//!   manifest.csv      path,label,split   (path relative to images/)
//!   images/           PNG files
//!   masks/            optional binary PNG masks named <image stem>.png
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::attribution::{resize, ExplanationMap, Grid};
use crate::error::{DixError, Result};
use crate::metrics::Mask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageEntry {
    pub path: PathBuf,
    pub stem: String,
    pub label: usize,
    pub split: Option<String>,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ImageEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    path: String,
    label: usize,
    #[serde(default)]
    split: Option<String>,
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

impl DatasetManifest {
    pub fn load(root: &Path, manifest: &str) -> Result<Self> {
        let manifest_path = root.join(manifest);
        let mut reader = csv::Reader::from_path(&manifest_path)
            .map_err(|e| DixError::config(format!("dataset manifest {}: {e}", manifest_path.display())))?;
        let mut entries = Vec::new();
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| {
                DixError::config(format!("dataset manifest {} row {}: {e}", manifest_path.display(), i + 1))
            })?;
            let path = root.join("images").join(&row.path);
            entries.push(ImageEntry {
                stem: stem_of(&path),
                path,
                label: row.label,
                split: row.split.filter(|s| !s.is_empty()),
                mask: None,
            });
        }
        let masks_dir = root.join("masks");
        if masks_dir.is_dir() {
            let mut by_stem: BTreeMap<String, usize> = BTreeMap::new();
            for (i, e) in entries.iter().enumerate() {
                by_stem.insert(e.stem.clone(), i);
            }
            let mut files: Vec<PathBuf> = std::fs::read_dir(&masks_dir)?
                .map(|d| d.map(|d| d.path()))
                .collect::<std::io::Result<_>>()?;
            files.sort();
            for f in files {
                let stem = stem_of(&f);
                let i = by_stem.get(&stem).ok_or_else(|| {
                    DixError::config(format!("mask {} has no matching image in the manifest", f.display()))
                })?;
                entries[*i].mask = Some(f);
            }
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn filtered(mut self, split: Option<&str>, limit: Option<usize>) -> Self {
        if let Some(s) = split {
            self.entries.retain(|e| e.split.as_deref() == Some(s));
        }
        if let Some(n) = limit {
            self.entries.truncate(n);
        }
        self
    }

    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.entries.iter().find(|e| e.label >= classes) {
            Some(e) => Err(DixError::config(format!(
                "{}: label {} outside [0, {classes})",
                e.path.display(),
                e.label
            ))),
            None => Ok(()),
        }
    }
}

/// RGB image as a `(3, H, W)` tensor with values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| DixError::Load(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Tensor::new(vec![3, h, w], (0..3 * h * w).map(|i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f64::from(raw[3 * p + c]) / 255.0
    }).collect())
}

/// Foreground where the grayscale value exceeds half range.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| DixError::Load(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Mask::new(h, w, img.into_raw().into_iter().map(|v| v > 127).collect())
}

/// Bilinear resize of every channel to `height x width`.
pub fn resize_image(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(DixError::addressing(format!("image must be (C, H, W), got {s:?}")));
    }
    let plane = s[1] * s[2];
    let mut data = Vec::with_capacity(s[0] * height * width);
    for ch in image.data().chunks(plane) {
        data.extend(resize::bilinear(ch, s[1], s[2], height, width));
    }
    Tensor::new(vec![s[0], height, width], data)
}

/// Brings an image to the model's input shape.
pub fn fit_to_model(image: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    if image.shape()[0] != input_shape[0] {
        return Err(DixError::addressing(format!(
            "image has {} channels, model expects {}",
            image.shape()[0],
            input_shape[0]
        )));
    }
    if image.shape() == input_shape {
        return Ok(image.clone());
    }
    resize_image(image, input_shape[1], input_shape[2])
}

/// Resizes a map's grid, keeping class and provenance.
pub fn resize_map(map: &ExplanationMap, height: usize, width: usize) -> ExplanationMap {
    if map.dims() == (height, width) {
        return map.clone();
    }
    let g = &map.grid;
    ExplanationMap {
        grid: Grid {
            height,
            width,
            values: resize::bilinear(&g.values, g.height, g.width, height, width),
        },
        class_index: map.class_index,
        provenance: map.provenance.clone(),
    }
}
