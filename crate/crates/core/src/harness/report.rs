//! CSV, JSON, Markdown and SVG report writers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{DixError, Result};
use crate::sanity::{CorrelationSummary, RandomizationSweep};

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub model: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub n_items: usize,
    pub config_digest: String,
    pub seed: u64,
}

pub const METRIC_COLUMNS: [&str; 7] = ["model", "method", "metric", "value", "n_items", "config_digest", "seed"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: String,
    pub depth: usize,
    pub layer: String,
    pub mean_corr: f64,
    pub n_fixtures: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub comparison: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub n_fixtures: usize,
    pub seed: u64,
}

impl SummaryRow {
    pub fn new(comparison: &str, s: &CorrelationSummary, seed: u64) -> Self {
        SummaryRow {
            comparison: comparison.into(),
            min: s.quartiles.min,
            q1: s.quartiles.q1,
            median: s.quartiles.median,
            q3: s.quartiles.q3,
            max: s.quartiles.max,
            mean: s.mean,
            n_fixtures: s.per_item.len(),
            seed,
        }
    }
}

fn csv_err(e: csv::Error) -> DixError {
    DixError::Io(std::io::Error::other(e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DixError::Io(std::io::Error::other(e)))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn sweep_rows(sweep: &RandomizationSweep) -> Vec<SweepRow> {
    sweep
        .depths
        .iter()
        .zip(&sweep.layers)
        .zip(&sweep.correlations)
        .map(|((&depth, layer), &c)| SweepRow {
            mode: sweep.mode.as_str().into(),
            depth,
            layer: layer.clone(),
            mean_corr: c,
            n_fixtures: sweep.n_fixtures,
            seed: sweep.seed,
        })
        .collect()
}

/// Methods as rows, metrics as columns.
pub fn comparison_table(rows: &[MetricRow]) -> String {
    let mut metrics: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, &str), BTreeMap<&str, f64>> = BTreeMap::new();
    let mut order: Vec<(&str, &str)> = Vec::new();
    for r in rows {
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
        let key = (r.model.as_str(), r.method.as_str());
        if !cells.contains_key(&key) {
            order.push(key);
        }
        cells.entry(key).or_default().insert(&r.metric, r.value);
    }
    let mut out = String::new();
    let _ = writeln!(out, "| model | method | {} |", metrics.join(" | "));
    let _ = writeln!(out, "|---|---|{}", "---|".repeat(metrics.len()));
    for key in order {
        let row = &cells[&key];
        let values: Vec<String> = metrics
            .iter()
            .map(|m| row.get(m).map_or("n/a".to_string(), |v| format!("{v:.4}")))
            .collect();
        let _ = writeln!(out, "| {} | {} | {} |", key.0, key.1, values.join(" | "));
    }
    out
}

/// Line plot of sweep correlations against depth.
pub fn sweep_svg(sweeps: &[RandomizationSweep], title: &str) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    let depths = sweeps.iter().map(|s| s.depths.len()).max().unwrap_or(1).max(2);
    let x = |d: usize| PAD + (W - 2.0 * PAD) * d as f64 / (depths - 1) as f64;
    let y = |c: f64| PAD + (H - 2.0 * PAD) * (1.0 - (c.clamp(-1.0, 1.0) + 1.0) / 2.0);
    let colors = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0);
    for c in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r##"<line x1="{PAD}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/><text x="{2:.1}" y="{3:.1}" text-anchor="end">{c}</text>"##,
            y(c),
            W - PAD,
            PAD - 6.0,
            y(c) + 4.0
        );
    }
    if let Some(first) = sweeps.first() {
        for (d, layer) in first.layers.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{layer}</text>"#,
                x(d),
                H - PAD + 16.0
            );
        }
    }
    for (i, sweep) in sweeps.iter().enumerate() {
        let color = colors[i % colors.len()];
        let points: Vec<String> = sweep
            .correlations
            .iter()
            .enumerate()
            .map(|(d, &c)| format!("{:.1},{:.1}", x(d), y(c)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            W - PAD - 80.0,
            PAD + 14.0 * (i as f64 + 1.0),
            sweep.mode.as_str()
        );
    }
    s.push_str("</svg>\n");
    s
}
