//! Configuration-driven runs behind the `dixray` binary.
//!
//! Every command reads a [`RunConfig`] and writes into its output directory:
//!
//! - `explain`: one `.dixm` map and one overlay PNG per (model, method, image)
//! - `evaluate`: `metrics.csv`, `metrics.json`, `metrics.md`, and the `.dixm` maps
//! - `segment`: `segmentation.csv` / `.json` / `.md`, no maps
//! - `sanity`: `sanity.csv`, one SVG plot per (model, method), and optionally
//!   `data_randomization.csv` / `.json`
//! - `ablate`: `ablation.csv`, `ablation.md` over every DIX layer-set variant
//!
//! Items that fail are listed in `failures.csv`, which only exists when
//! something failed. Output order follows the config order, then image order.

mod config;
mod dataset;
mod mapfile;
mod overlay;
mod report;

pub use config::{
    Command, DatasetSection, MethodSection, MetricsSection, ModelSpec, OverlaySection, RunConfig, SanitySection,
};
pub use dataset::{fit_to_model, load_image, load_mask, resize_image, resize_map, DatasetManifest, ImageEntry};
pub use mapfile::{read_map, write_map, StoredMap, MAGIC, VERSION};
pub use overlay::{image_rgb8, render_overlay, Colormap};
pub use report::{
    comparison_table, sweep_rows, sweep_svg, write_csv, write_json, MetricRow, SummaryRow, SweepRow, METRIC_COLUMNS,
};

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::adapters::ModelHandle;
use crate::attribution::{explain_normalized, ExplanationMap, MethodKind, MethodPreset, ResolvedMethod};
use crate::error::{DixError, Result};
use crate::metrics::{
    adp, aic_sic, perturbation_report, pic, segmentation_report, Mask, MetricName, MetricReport, PerturbationMetric,
};
use crate::sanity::{
    data_randomization, randomization_sweep, synthetic_dataset, RandomizationSweep, SYNTHETIC_SHAPE,
};
use crate::tensor::Tensor;

/// A single item that could not be processed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub model: String,
    pub method: String,
    pub item: String,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    /// Files written, in creation order.
    pub files: Vec<PathBuf>,
    pub metric_rows: Vec<MetricRow>,
    pub sweep_rows: Vec<SweepRow>,
    pub failures: Vec<Failure>,
}

impl RunSummary {
    fn record(&mut self, path: PathBuf) {
        self.files.push(path);
    }
}

/// Filesystem-safe version of a label.
pub fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

struct Item {
    name: String,
    /// Image at its stored resolution.
    image: Tensor,
    /// Image at the model's input resolution.
    input: Tensor,
    mask: Option<Mask>,
}

struct Context<'a> {
    config: &'a RunConfig,
    base: &'a Path,
    out: PathBuf,
    digest: String,
    summary: RunSummary,
}

impl<'a> Context<'a> {
    fn new(config: &'a RunConfig, base: &'a Path) -> Result<Self> {
        let out = base.join(&config.output_dir);
        std::fs::create_dir_all(&out)?;
        Ok(Context {
            config,
            base,
            summary: RunSummary {
                output_dir: out.clone(),
                ..RunSummary::default()
            },
            out,
            digest: config.digest(),
        })
    }

    fn fail(&mut self, model: &str, method: &str, item: &str, error: &DixError) {
        log::warn!("{model} {method} {item}: {error}");
        self.summary.failures.push(Failure {
            model: model.into(),
            method: method.into(),
            item: item.into(),
            error: error.to_string(),
        });
    }

    fn models(&self) -> Result<Vec<(String, ModelHandle)>> {
        self.config
            .model
            .iter()
            .map(|spec| spec.load(self.base).map(|m| (spec.label(), m)))
            .collect()
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        let ds = self.config.dataset()?;
        Ok(DatasetManifest::load(&self.base.join(&ds.path), &ds.manifest)?
            .filtered(ds.split.as_deref(), ds.limit))
    }

    /// Loads every image of the dataset for `model`; unreadable images become failures.
    fn items(&mut self, manifest: &DatasetManifest, model_label: &str, model: &ModelHandle) -> Vec<Item> {
        let shape = model.input_shape();
        let mut items = Vec::new();
        for entry in &manifest.entries {
            let loaded = load_image(&entry.path).and_then(|image| {
                let input = fit_to_model(&image, &shape)?;
                let mask = entry.mask.as_deref().map(load_mask).transpose()?;
                if let Some(m) = &mask {
                    if (m.height, m.width) != (image.shape()[1], image.shape()[2]) {
                        return Err(DixError::addressing(format!(
                            "mask is {}x{} but image is {}x{}",
                            m.height,
                            m.width,
                            image.shape()[1],
                            image.shape()[2]
                        )));
                    }
                }
                Ok(Item {
                    name: entry.stem.clone(),
                    image,
                    input,
                    mask,
                })
            });
            match loaded {
                Ok(item) => items.push(item),
                Err(e) => self.fail(model_label, "-", &entry.stem, &e),
            }
        }
        items
    }

    /// Normalized maps at model resolution; failed items are dropped.
    fn maps<'i>(
        &mut self,
        model_label: &str,
        model: &ModelHandle,
        preset: MethodPreset,
        method: &ResolvedMethod,
        items: &'i [Item],
    ) -> Vec<(&'i Item, ExplanationMap)> {
        let results = crate::fan_out(model, items.len(), |m, i| explain_normalized(m, &items[i].input, None, method));
        let mut out = Vec::new();
        for (item, r) in items.iter().zip(results) {
            match r {
                Ok(map) => out.push((item, map)),
                Err(e) => self.fail(model_label, preset.as_str(), &item.name, &e),
            }
        }
        out
    }

    fn resolve(&mut self, model_label: &str, model: &ModelHandle, preset: MethodPreset) -> Option<ResolvedMethod> {
        match self.config.method_config(preset).resolve(model) {
            Ok(m) => Some(m),
            Err(e) => {
                self.fail(model_label, preset.as_str(), "*", &e);
                None
            }
        }
    }

    fn metric_rows(&self, model: &str, method: &str, reports: &[MetricReport]) -> Vec<MetricRow> {
        reports
            .iter()
            .map(|r| MetricRow {
                model: model.into(),
                method: method.into(),
                metric: r.metric.as_str().into(),
                value: r.value,
                n_items: r.n_items(),
                config_digest: self.digest.clone(),
                seed: self.config.seed,
            })
            .collect()
    }

    fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T], header: &[&str]) -> Result<()> {
        let path = self.out.join(name);
        write_csv(&path, rows, header)?;
        self.summary.record(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.out.join(name);
        write_json(&path, value)?;
        self.summary.record(path);
        Ok(())
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.out.join(name);
        std::fs::write(&path, text)?;
        self.summary.record(path);
        Ok(())
    }

    fn finish(mut self) -> Result<RunSummary> {
        let failures = std::mem::take(&mut self.summary.failures);
        if failures.is_empty() {
            match std::fs::remove_file(self.out.join("failures.csv")) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        } else {
            self.write_csv("failures.csv", &failures, &["model", "method", "item", "error"])?;
        }
        self.summary.failures = failures;
        Ok(self.summary)
    }
}

/// Runs one command. Relative paths in the config resolve against `base`.
pub fn run(command: Command, config: &RunConfig, base: &Path) -> Result<RunSummary> {
    config.validate()?;
    let mut ctx = Context::new(config, base)?;
    match command {
        Command::Explain => explain_cmd(&mut ctx)?,
        Command::Evaluate => evaluate_cmd(&mut ctx, false)?,
        Command::Segment => evaluate_cmd(&mut ctx, true)?,
        Command::Sanity => sanity_cmd(&mut ctx)?,
        Command::Ablate => ablate_cmd(&mut ctx)?,
    }
    ctx.finish()
}

fn explain_cmd(ctx: &mut Context) -> Result<()> {
    let manifest = ctx.manifest()?;
    let colormap = Colormap::from_name(&ctx.config.overlay.colormap)?;
    let alpha = ctx.config.overlay.alpha;
    for (label, model) in ctx.models()? {
        let items = ctx.items(&manifest, &label, &model);
        for preset in ctx.config.presets()? {
            let Some(method) = ctx.resolve(&label, &model, preset) else { continue };
            let dir = ctx.out.join("maps").join(slug(&label)).join(preset.as_str());
            std::fs::create_dir_all(&dir)?;
            for (item, map) in ctx.maps(&label, &model, preset, &method, &items) {
                let s = item.image.shape();
                let map = resize_map(&map, s[1], s[2]);
                let written = (|| -> Result<Vec<PathBuf>> {
                    let map_path = dir.join(format!("{}.dixm", item.name));
                    write_map(&map_path, &map)?;
                    let png_path = dir.join(format!("{}.png", item.name));
                    std::fs::write(&png_path, render_overlay(&item.image, &map, alpha, colormap)?)?;
                    Ok(vec![map_path, png_path])
                })();
                match written {
                    Ok(paths) => paths.into_iter().for_each(|p| ctx.summary.record(p)),
                    Err(e) => ctx.fail(&label, preset.as_str(), &item.name, &e),
                }
            }
        }
    }
    Ok(())
}

/// Metrics for one (model, method) over the items whose maps succeeded.
fn score(
    ctx: &mut Context,
    label: &str,
    model: &ModelHandle,
    preset: MethodPreset,
    names: &[MetricName],
    pairs: &[(&Item, ExplanationMap)],
) -> Vec<MetricReport> {
    let mut reports = Vec::new();
    if pairs.is_empty() {
        return reports;
    }
    let images: Vec<Tensor> = pairs.iter().map(|(it, _)| it.input.clone()).collect();
    let maps: Vec<ExplanationMap> = pairs.iter().map(|(_, m)| m.clone()).collect();
    let metrics = &ctx.config.metrics;
    let mut info: Option<(MetricReport, MetricReport)> = None;
    for &name in names {
        let result = if let Some(p) = PerturbationMetric::from_name(name) {
            perturbation_report(model, &images, &maps, p, &metrics.fractions)
        } else {
            match name {
                MetricName::Adp => adp(model, &images, &maps),
                MetricName::Pic => pic(model, &images, &maps),
                MetricName::Aic | MetricName::Sic => {
                    if info.is_none() {
                        match aic_sic(model, &images, &maps, &metrics.info_config()) {
                            Ok(r) => info = Some(r),
                            Err(e) => ctx.fail(label, preset.as_str(), name.as_str(), &e),
                        }
                    }
                    match &info {
                        Some((aic, sic)) => Ok(if name == MetricName::Aic { aic.clone() } else { sic.clone() }),
                        None => continue,
                    }
                }
                _ => continue,
            }
        };
        match result {
            Ok(r) => reports.push(r),
            Err(e) => ctx.fail(label, preset.as_str(), name.as_str(), &e),
        }
    }
    let seg: Vec<MetricName> = names.iter().copied().filter(MetricName::is_segmentation).collect();
    if !seg.is_empty() {
        let (seg_maps, masks): (Vec<ExplanationMap>, Vec<Mask>) = pairs
            .iter()
            .filter_map(|(it, m)| it.mask.as_ref().map(|mask| (resize_map(m, mask.height, mask.width), mask.clone())))
            .unzip();
        if masks.is_empty() {
            ctx.fail(
                label,
                preset.as_str(),
                "masks",
                &DixError::config("segmentation metrics requested but no image has a mask"),
            );
        } else {
            match segmentation_report(&seg_maps, &masks) {
                Ok(all) => reports.extend(all.into_iter().filter(|r| seg.contains(&r.metric))),
                Err(e) => ctx.fail(label, preset.as_str(), "segmentation", &e),
            }
        }
    }
    reports.sort_by_key(|r| names.iter().position(|n| *n == r.metric));
    reports
}

#[derive(Serialize)]
struct ReportEntry<'r> {
    model: &'r str,
    method: &'r str,
    report: &'r MetricReport,
}

fn evaluate_presets(
    ctx: &mut Context,
    presets: &[MethodPreset],
    names: &[MetricName],
    save_maps: bool,
) -> Result<Vec<(String, String, MetricReport)>> {
    let manifest = ctx.manifest()?;
    let mut all = Vec::new();
    for (label, model) in ctx.models()? {
        let items = ctx.items(&manifest, &label, &model);
        for &preset in presets {
            let Some(method) = ctx.resolve(&label, &model, preset) else { continue };
            let pairs = ctx.maps(&label, &model, preset, &method, &items);
            if save_maps && !pairs.is_empty() {
                let dir = ctx.out.join("maps").join(slug(&label)).join(preset.as_str());
                std::fs::create_dir_all(&dir)?;
                for (item, map) in &pairs {
                    let s = item.image.shape();
                    let path = dir.join(format!("{}.dixm", item.name));
                    write_map(&path, &resize_map(map, s[1], s[2]))?;
                    ctx.summary.record(path);
                }
            }
            for r in score(ctx, &label, &model, preset, names, &pairs) {
                all.push((label.clone(), preset.as_str().to_string(), r));
            }
        }
    }
    Ok(all)
}

fn write_metric_outputs(ctx: &mut Context, stem: &str, table: &str, reports: &[(String, String, MetricReport)]) -> Result<()> {
    let rows: Vec<MetricRow> = reports
        .iter()
        .flat_map(|(model, method, r)| ctx.metric_rows(model, method, std::slice::from_ref(r)))
        .collect();
    ctx.write_csv(&format!("{stem}.csv"), &rows, &METRIC_COLUMNS)?;
    let entries: Vec<ReportEntry> = reports
        .iter()
        .map(|(model, method, report)| ReportEntry { model, method, report })
        .collect();
    ctx.write_json(&format!("{stem}.json"), &entries)?;
    ctx.write_text(table, &comparison_table(&rows))?;
    ctx.summary.metric_rows.extend(rows);
    Ok(())
}

fn evaluate_cmd(ctx: &mut Context, segmentation_only: bool) -> Result<()> {
    let mut names = ctx.config.metric_names()?;
    if segmentation_only {
        names.retain(MetricName::is_segmentation);
        if names.is_empty() {
            names = vec![MetricName::Pa, MetricName::MAp, MetricName::MIoU, MetricName::MF1];
        }
    }
    let presets = ctx.config.presets()?;
    let reports = evaluate_presets(ctx, &presets, &names, !segmentation_only)?;
    let stem = if segmentation_only { "segmentation" } else { "metrics" };
    write_metric_outputs(ctx, stem, &format!("{stem}.md"), &reports)
}

fn ablate_cmd(ctx: &mut Context) -> Result<()> {
    let names = ctx.config.metric_names()?;
    let mut presets: Vec<MethodPreset> = MethodPreset::ALL
        .into_iter()
        .filter(|p| p.config().kind == MethodKind::Dix)
        .collect();
    for p in ctx.config.presets()? {
        if !presets.contains(&p) {
            presets.push(p);
        }
    }
    let reports = evaluate_presets(ctx, &presets, &names, false)?;
    write_metric_outputs(ctx, "ablation", "ablation.md", &reports)
}

/// Dataset images when a dataset is configured, otherwise synthetic fixtures.
fn sanity_fixtures(ctx: &mut Context, label: &str, model: &ModelHandle) -> Result<Vec<Tensor>> {
    let n = ctx.config.sanity.fixtures;
    if ctx.config.dataset.is_some() {
        let manifest = ctx.manifest()?;
        return Ok(ctx.items(&manifest, label, model).into_iter().take(n).map(|it| it.input).collect());
    }
    let shape = model.input_shape();
    let test = synthetic_dataset(0, n, ctx.config.seed).test;
    test.into_iter()
        .map(|(x, _)| if shape == SYNTHETIC_SHAPE { Ok(x) } else { resize_image(&x, shape[1], shape[2]) })
        .collect::<Result<Vec<_>>>()
        .and_then(|xs| {
            if shape[0] != SYNTHETIC_SHAPE[0] {
                Err(DixError::config(format!(
                    "{label}: synthetic fixtures have {} channels but the model expects {}; configure a dataset",
                    SYNTHETIC_SHAPE[0], shape[0]
                )))
            } else {
                Ok(xs)
            }
        })
}

fn sanity_cmd(ctx: &mut Context) -> Result<()> {
    let seed = ctx.config.seed;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut data_reports = Vec::new();
    let specs = ctx.config.model.clone();
    for (spec, (label, model)) in specs.iter().zip(ctx.models()?) {
        let fixtures = sanity_fixtures(ctx, &label, &model)?;
        for preset in ctx.config.presets()? {
            let Some(method) = ctx.resolve(&label, &model, preset) else { continue };
            let mut sweeps: Vec<RandomizationSweep> = Vec::new();
            for &mode in &ctx.config.sanity.modes.clone() {
                match randomization_sweep(&model, &method, &fixtures, mode, seed) {
                    Ok(sweep) => {
                        for r in sweep_rows(&sweep) {
                            rows.push((label.clone(), preset.as_str().to_string(), r));
                        }
                        sweeps.push(sweep);
                    }
                    Err(e) => ctx.fail(&label, preset.as_str(), mode.as_str(), &e),
                }
            }
            if !sweeps.is_empty() {
                let name = format!("sanity_{}_{}.svg", slug(&label), preset.as_str());
                let title = format!("{label} {}", preset.as_str());
                ctx.write_text(&name, &sweep_svg(&sweeps, &title))?;
            }
            if ctx.config.sanity.data_randomization {
                let kind = match spec.reference_kind()? {
                    Some(k) if k.convnet_spec().is_some() => k,
                    _ => {
                        ctx.fail(
                            &label,
                            preset.as_str(),
                            "data_randomization",
                            &DixError::capability("data randomization retrains a built-in convolutional reference model"),
                        );
                        continue;
                    }
                };
                let s = &ctx.config.sanity;
                let dataset = synthetic_dataset(s.train_size, s.test_size, seed);
                match data_randomization(kind, &dataset, &ctx.config.method_config(preset), seed, &s.data_config()) {
                    Ok(report) => {
                        let tag = format!("{label}/{}", preset.as_str());
                        summaries.push(SummaryRow::new(&format!("{tag}:true_vs_permuted"), &report.permuted, seed));
                        summaries.push(SummaryRow::new(&format!("{tag}:true_vs_reseeded"), &report.reseeded, seed));
                        data_reports.push((label.clone(), preset.as_str().to_string(), report));
                    }
                    Err(e) => ctx.fail(&label, preset.as_str(), "data_randomization", &e),
                }
            }
        }
    }

    #[derive(Serialize)]
    struct Row<'r> {
        model: &'r str,
        method: &'r str,
        mode: &'r str,
        depth: usize,
        layer: &'r str,
        mean_corr: f64,
        n_fixtures: usize,
        seed: u64,
    }
    let flat: Vec<Row> = rows
        .iter()
        .map(|(model, method, r)| Row {
            model,
            method,
            mode: &r.mode,
            depth: r.depth,
            layer: &r.layer,
            mean_corr: r.mean_corr,
            n_fixtures: r.n_fixtures,
            seed: r.seed,
        })
        .collect();
    ctx.write_csv(
        "sanity.csv",
        &flat,
        &["model", "method", "mode", "depth", "layer", "mean_corr", "n_fixtures", "seed"],
    )?;
    ctx.summary.sweep_rows = rows.into_iter().map(|(_, _, r)| r).collect();
    if ctx.config.sanity.data_randomization {
        ctx.write_csv(
            "data_randomization.csv",
            &summaries,
            &["comparison", "min", "q1", "median", "q3", "max", "mean", "n_fixtures", "seed"],
        )?;
        #[derive(Serialize)]
        struct Entry<'r> {
            model: &'r str,
            method: &'r str,
            report: &'r crate::sanity::DataRandomizationReport,
        }
        let entries: Vec<Entry> = data_reports
            .iter()
            .map(|(model, method, report)| Entry { model, method, report })
            .collect();
        ctx.write_json("data_randomization.json", &entries)?;
    }
    Ok(())
}
