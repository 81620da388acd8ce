use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Aggregation, BaselineSpec, IntegrandSpec, PathSpec};
use crate::error::{DixError, Result};

/// Row-major 2-D grid of reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(DixError::addressing(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Grid { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Grid {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(DixError::addressing("ragged rows"));
        }
        Grid::new(h, w, rows.concat())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_dims(&self, other: &Grid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(DixError::addressing(format!(
                "map dimensions differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub method: String,
    pub path: Option<PathSpec>,
    pub baseline: Option<String>,
    pub integrand: Option<IntegrandSpec>,
    pub layers: Vec<usize>,
    pub aggregation: Option<Aggregation>,
    pub normalized: bool,
}

impl Provenance {
    pub(crate) fn layer_map(
        model_id: String,
        method: &str,
        path: PathSpec,
        baseline: &BaselineSpec,
        integrand: IntegrandSpec,
        layer: usize,
    ) -> Self {
        Provenance {
            model_id,
            method: method.to_string(),
            path: Some(path),
            baseline: Some(baseline.describe()),
            integrand: Some(integrand),
            layers: vec![layer],
            aggregation: None,
            normalized: false,
        }
    }
}

/// Signed attribution over the input's spatial grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMap {
    pub grid: Grid,
    pub class_index: usize,
    pub provenance: Provenance,
}

impl ExplanationMap {
    pub fn values(&self) -> &[f64] {
        &self.grid.values
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    /// Hex SHA-256 over the class index and provenance record.
    pub fn provenance_digest(&self) -> String {
        let record = serde_json::json!({
            "class_index": self.class_index,
            "provenance": self.provenance,
        });
        let bytes = serde_json::to_vec(&record).expect("provenance serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Map with bare provenance, for synthetic inputs to metrics and tests.
    pub fn from_grid(grid: Grid, class_index: usize) -> Self {
        ExplanationMap {
            grid,
            class_index,
            provenance: Provenance {
                model_id: String::new(),
                method: "external".into(),
                path: None,
                baseline: None,
                integrand: None,
                layers: Vec::new(),
                aggregation: None,
                normalized: false,
            },
        }
    }
}
