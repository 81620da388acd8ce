//! Parameter- and data-randomization sanity checks for explanation methods.

mod data;
mod synthetic;
mod train;

use serde::{Deserialize, Serialize};

use crate::adapters::ModelHandle;
use crate::attribution::{explain, ExplanationMap, ResolvedMethod};
use crate::error::{DixError, Result};
use crate::tensor::Tensor;

pub use data::{data_randomization, permute_labels, DataRandomizationConfig, DataRandomizationReport};
pub use synthetic::{synthetic_dataset, LabeledDataset, SYNTHETIC_CLASSES, SYNTHETIC_SHAPE};
pub use train::{accuracy, train_convnet, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    /// Set when one side has no rank variance; `value` is then 0.
    pub degenerate: bool,
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman_values(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(DixError::addressing(format!(
            "cannot correlate {} values with {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    let value = if ra == rb { 1.0 } else { (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0) };
    Ok(Correlation {
        value,
        degenerate: false,
    })
}

/// Spearman rank correlation of two maps over their raw values.
pub fn spearman(map_a: &ExplanationMap, map_b: &ExplanationMap) -> Result<Correlation> {
    map_a.grid.same_dims(&map_b.grid)?;
    spearman_values(map_a.values(), map_b.values())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub per_item: Vec<f64>,
    pub quartiles: Quartiles,
    pub mean: f64,
    pub degenerate: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl CorrelationSummary {
    /// Quartiles by linear interpolation between order statistics.
    pub fn from_values(per_item: Vec<f64>, degenerate: usize) -> Result<Self> {
        if per_item.is_empty() {
            return Err(DixError::config("correlation summary needs at least one value"));
        }
        let mut sorted = per_item.clone();
        sorted.sort_by(f64::total_cmp);
        let quartiles = Quartiles {
            min: sorted[0],
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        };
        let mean = per_item.iter().sum::<f64>() / per_item.len() as f64;
        Ok(CorrelationSummary {
            per_item,
            quartiles,
            mean,
            degenerate,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomizationMode {
    /// Depth `d` re-draws the top `d` groups.
    Cascading,
    /// Depth `d` re-draws only the `d`-th group from the top.
    Independent,
}

impl RandomizationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RandomizationMode::Cascading => "cascading",
            RandomizationMode::Independent => "independent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationSweep {
    pub mode: RandomizationMode,
    pub depths: Vec<usize>,
    /// Name of the group reached at each depth (`"none"` at depth 0).
    pub layers: Vec<String>,
    pub correlations: Vec<f64>,
    pub degenerate: Vec<usize>,
    pub n_fixtures: usize,
    pub seed: u64,
    pub skipped: Vec<String>,
}

fn maps_for(model: &mut ModelHandle, method: &ResolvedMethod, fixtures: &[Tensor], classes: &[usize]) -> Result<Vec<ExplanationMap>> {
    fixtures
        .iter()
        .zip(classes)
        .map(|(x, &c)| explain(model, x, Some(c), method))
        .collect()
}

/// Mean Spearman correlation between original and randomized-model maps at
/// every depth. Both maps explain the original model's predicted class.
pub fn randomization_sweep(
    model: &ModelHandle,
    method: &ResolvedMethod,
    fixtures: &[Tensor],
    mode: RandomizationMode,
    seed: u64,
) -> Result<RandomizationSweep> {
    if fixtures.is_empty() {
        return Err(DixError::config("randomization sweep needs at least one fixture"));
    }
    let groups = model.randomizable_layers();
    if groups.len() < 2 {
        return Err(DixError::capability(format!(
            "{} has {} randomizable layers; a sweep needs at least 2",
            model.name(),
            groups.len()
        )));
    }
    let mut base = model.clone();
    let classes = fixtures
        .iter()
        .map(|x| base.forward(x).map(|p| p.top_class()))
        .collect::<Result<Vec<_>>>()?;
    let original = maps_for(&mut base, method, fixtures, &classes)?;
    let depths: Vec<usize> = (0..=groups.len()).collect();
    let top = groups.len();
    let results = crate::fan_out(model, depths.len(), |m, d| {
        if d == 0 {
            return Ok((1.0, 0, Vec::new()));
        }
        let mut randomized = m.clone();
        let targets: Vec<usize> = match mode {
            RandomizationMode::Cascading => (top - d..top).rev().collect(),
            RandomizationMode::Independent => vec![top - d],
        };
        let mut skipped = Vec::new();
        for t in targets {
            match randomized.randomize_layer(t, seed) {
                Ok(()) => {}
                Err(DixError::Capability(msg)) => skipped.push(format!("{}: {msg}", groups[t])),
                Err(e) => return Err(e),
            }
        }
        let maps = maps_for(&mut randomized, method, fixtures, &classes)?;
        let mut total = 0.0;
        let mut degenerate = 0;
        for (a, b) in original.iter().zip(&maps) {
            let c = spearman(a, b)?;
            total += c.value;
            degenerate += usize::from(c.degenerate);
        }
        Ok((total / fixtures.len() as f64, degenerate, skipped))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut sweep = RandomizationSweep {
        mode,
        depths: depths.clone(),
        layers: depths
            .iter()
            .map(|&d| if d == 0 { "none".to_string() } else { groups[top - d].clone() })
            .collect(),
        correlations: Vec::new(),
        degenerate: Vec::new(),
        n_fixtures: fixtures.len(),
        seed,
        skipped: Vec::new(),
    };
    for (corr, deg, skipped) in results {
        sweep.correlations.push(corr);
        sweep.degenerate.push(deg);
        sweep.skipped.extend(skipped);
    }
    sweep.skipped.sort();
    sweep.skipped.dedup();
    Ok(sweep)
}
