//! TOML run configuration. Unknown keys are rejected everywhere.
//!
//! ```toml
//! seed = 0
//! deterministic = true
//! output_dir = "out"
//!
//! [[model]]
//! reference = "tiny_cnn"
//! seed = 42
//!
//! [method]
//! presets = ["dix3", "ig"]
//! steps = 10
//!
//! [dataset]
//! path = "data/synthetic"
//! split = "test"
//!
//! [metrics]
//! names = ["NEG", "POS", "INS", "DEL", "ADP", "PIC"]
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{load_external_model, make_reference_model, ModelHandle, ReferenceKind};
use crate::attribution::{MethodConfig, MethodPreset};
use crate::error::{DixError, Result};
use crate::metrics::{BlurConfig, InfoCurveConfig, MetricName, DEFAULT_FRACTIONS};
use crate::sanity::{DataRandomizationConfig, RandomizationMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Explain,
    Evaluate,
    Segment,
    Sanity,
    Ablate,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::Explain,
        Command::Evaluate,
        Command::Segment,
        Command::Sanity,
        Command::Ablate,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Explain => "explain",
            Command::Evaluate => "evaluate",
            Command::Segment => "segment",
            Command::Sanity => "sanity",
            Command::Ablate => "ablate",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = DixError;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| {
            DixError::config(format!(
                "unknown command {s:?}; expected one of {}",
                Command::ALL.map(|c| c.as_str()).join(", ")
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Optional; when present it must agree with the command given on the command line.
    pub command: Option<Command>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub model: Vec<ModelSpec>,
    #[serde(default)]
    pub method: MethodSection,
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub overlay: OverlaySection,
    #[serde(default)]
    pub sanity: SanitySection,
}

fn default_output() -> PathBuf {
    PathBuf::from("dixray-out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Built-in model kind, e.g. `tiny_cnn`.
    pub reference: Option<String>,
    pub seed: Option<u64>,
    /// Registered loader name, e.g. `convnet-json`.
    pub plugin: Option<String>,
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub options: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    #[serde(default = "default_presets")]
    pub presets: Vec<String>,
    pub steps: Option<usize>,
}

fn default_presets() -> Vec<String> {
    vec!["dix2".into()]
}

impl Default for MethodSection {
    fn default() -> Self {
        MethodSection {
            presets: default_presets(),
            steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    #[serde(default = "default_manifest")]
    pub manifest: String,
    /// Keep only entries with this split tag.
    pub split: Option<String>,
    pub limit: Option<usize>,
}

fn default_manifest() -> String {
    "manifest.csv".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default = "default_metrics")]
    pub names: Vec<String>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_reveal")]
    pub reveal_grid: Vec<f64>,
    #[serde(default = "default_bins")]
    pub info_bins: usize,
    #[serde(default = "default_sigma")]
    pub blur_sigma: f64,
    #[serde(default = "default_radius")]
    pub blur_radius: usize,
}

fn default_metrics() -> Vec<String> {
    ["NEG", "POS", "INS", "DEL", "ADP", "PIC", "AIC", "SIC"]
        .map(String::from)
        .to_vec()
}

fn default_fractions() -> Vec<f64> {
    DEFAULT_FRACTIONS.to_vec()
}

fn default_reveal() -> Vec<f64> {
    InfoCurveConfig::default().reveal_grid
}

fn default_bins() -> usize {
    InfoCurveConfig::default().bins
}

fn default_sigma() -> f64 {
    BlurConfig::default().sigma
}

fn default_radius() -> usize {
    BlurConfig::default().radius
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            names: default_metrics(),
            fractions: default_fractions(),
            reveal_grid: default_reveal(),
            info_bins: default_bins(),
            blur_sigma: default_sigma(),
            blur_radius: default_radius(),
        }
    }
}

impl MetricsSection {
    pub fn info_config(&self) -> InfoCurveConfig {
        InfoCurveConfig {
            reveal_grid: self.reveal_grid.clone(),
            bins: self.info_bins,
            blur: BlurConfig {
                sigma: self.blur_sigma,
                radius: self.blur_radius,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlaySection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_colormap")]
    pub colormap: String,
}

fn default_alpha() -> f64 {
    0.6
}

fn default_colormap() -> String {
    "heat".into()
}

impl Default for OverlaySection {
    fn default() -> Self {
        OverlaySection {
            alpha: default_alpha(),
            colormap: default_colormap(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SanitySection {
    #[serde(default = "default_modes")]
    pub modes: Vec<RandomizationMode>,
    /// Number of fixtures for the parameter sweeps.
    #[serde(default = "default_fixtures")]
    pub fixtures: usize,
    #[serde(default)]
    pub data_randomization: bool,
    #[serde(default = "default_n_train")]
    pub train_size: usize,
    #[serde(default = "default_n_test")]
    pub test_size: usize,
    #[serde(default = "default_compare")]
    pub compare_fixtures: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_margin")]
    pub chance_margin: f64,
}

fn default_modes() -> Vec<RandomizationMode> {
    vec![RandomizationMode::Cascading, RandomizationMode::Independent]
}

fn default_fixtures() -> usize {
    16
}

fn default_n_train() -> usize {
    1000
}

fn default_n_test() -> usize {
    1000
}

fn default_compare() -> usize {
    DataRandomizationConfig::default().fixtures
}

fn default_epochs() -> usize {
    TrainConfig::default().max_epochs
}

fn default_lr() -> f64 {
    TrainConfig::default().learning_rate
}

fn default_margin() -> f64 {
    DataRandomizationConfig::default().chance_margin
}

impl Default for SanitySection {
    fn default() -> Self {
        SanitySection {
            modes: default_modes(),
            fixtures: default_fixtures(),
            data_randomization: false,
            train_size: default_n_train(),
            test_size: default_n_test(),
            compare_fixtures: default_compare(),
            max_epochs: default_epochs(),
            learning_rate: default_lr(),
            chance_margin: default_margin(),
        }
    }
}

impl SanitySection {
    pub fn data_config(&self) -> DataRandomizationConfig {
        DataRandomizationConfig {
            train: TrainConfig {
                learning_rate: self.learning_rate,
                max_epochs: self.max_epochs,
                ..TrainConfig::default()
            },
            chance_margin: self.chance_margin,
            fixtures: self.compare_fixtures,
        }
    }
}

impl ModelSpec {
    pub fn label(&self) -> String {
        match (&self.reference, &self.plugin) {
            (Some(r), _) => format!("{r}/seed{}", self.seed.unwrap_or(0)),
            (None, Some(p)) => format!(
                "{p}:{}",
                self.checkpoint.as_deref().map(Path::display).map(|d| d.to_string()).unwrap_or_default()
            ),
            (None, None) => "unspecified".into(),
        }
    }

    pub fn reference_kind(&self) -> Result<Option<ReferenceKind>> {
        self.reference.as_deref().map(str::parse).transpose()
    }

    fn validate(&self, at: &str) -> Result<()> {
        match (&self.reference, &self.plugin) {
            (Some(_), Some(_)) => Err(DixError::config(format!("{at}: set either reference or plugin, not both"))),
            (None, None) => Err(DixError::config(format!("{at}: one of reference or plugin is required"))),
            (Some(_), None) => {
                if self.checkpoint.is_some() || !self.options.is_empty() {
                    return Err(DixError::config(format!(
                        "{at}: checkpoint and options apply only to plugin models"
                    )));
                }
                self.reference_kind()
                    .map(|_| ())
                    .map_err(|e| DixError::config(format!("{at}.reference: {e}")))
            }
            (None, Some(_)) => {
                if self.checkpoint.is_none() {
                    return Err(DixError::config(format!("{at}.checkpoint: required with plugin")));
                }
                if self.seed.is_some() {
                    return Err(DixError::config(format!("{at}.seed: applies only to reference models")));
                }
                Ok(())
            }
        }
    }

    /// Loads the model; relative checkpoint paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<ModelHandle> {
        if let Some(kind) = self.reference_kind()? {
            return make_reference_model(kind, self.seed.unwrap_or(0));
        }
        let plugin = self.plugin.as_deref().unwrap_or_default();
        let checkpoint = self.checkpoint.as_deref().unwrap_or(Path::new(""));
        load_external_model(plugin, &base.join(checkpoint), &self.options)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| DixError::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DixError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.is_empty() {
            return Err(DixError::config("model: at least one [[model]] table is required"));
        }
        for (i, m) in self.model.iter().enumerate() {
            m.validate(&format!("model[{i}]"))?;
        }
        self.presets()?;
        if self.method.steps == Some(0) {
            return Err(DixError::config("method.steps: must be at least 1"));
        }
        self.metric_names()?;
        if !(0.0..=1.0).contains(&self.overlay.alpha) {
            return Err(DixError::config(format!(
                "overlay.alpha: {} is outside [0, 1]",
                self.overlay.alpha
            )));
        }
        super::overlay::Colormap::from_name(&self.overlay.colormap)
            .map_err(|e| DixError::config(format!("overlay.colormap: {e}")))?;
        Ok(())
    }

    pub fn presets(&self) -> Result<Vec<MethodPreset>> {
        if self.method.presets.is_empty() {
            return Err(DixError::config("method.presets: list is empty"));
        }
        self.method
            .presets
            .iter()
            .map(|p| p.parse().map_err(|e| DixError::config(format!("method.presets: {e}"))))
            .collect()
    }

    pub fn method_config(&self, preset: MethodPreset) -> MethodConfig {
        let config = preset.config();
        match self.method.steps {
            Some(n) => config.with_steps(n),
            None => config,
        }
    }

    pub fn metric_names(&self) -> Result<Vec<MetricName>> {
        self.metrics
            .names
            .iter()
            .map(|m| m.parse().map_err(|e| DixError::config(format!("metrics.names: {e}"))))
            .collect()
    }

    pub fn dataset(&self) -> Result<&DatasetSection> {
        self.dataset
            .as_ref()
            .ok_or_else(|| DixError::config("dataset: section required for this command"))
    }

    /// Short digest of the whole configuration, excluding the output location.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        crate::metrics::protocol_digest(&c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[model]]
reference = "tiny_cnn"
seed = 42
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.presets().unwrap(), vec![MethodPreset::Dix2]);
        assert_eq!(c.metrics.fractions.len(), 10);
        assert!(!c.deterministic);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml(&format!("colour = 1\n{MINIMAL}")).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        let err = RunConfig::from_toml(&format!("{MINIMAL}\n[method]\npreset = \"dix2\"\n")).unwrap_err();
        assert!(err.to_string().contains("preset"), "{err}");
    }

    #[test]
    fn unknown_preset_lists_valid_ones() {
        let err = RunConfig::from_toml(&format!("{MINIMAL}\n[method]\npresets = [\"dix9\"]\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("method.presets") && msg.contains("dix3_grads"), "{msg}");
    }

    #[test]
    fn model_needs_exactly_one_source() {
        let err = RunConfig::from_toml("[[model]]\nseed = 1\n").unwrap_err();
        assert!(err.to_string().contains("model[0]"));
        let err = RunConfig::from_toml("[[model]]\nreference = \"tiny_cnn\"\nplugin = \"convnet-json\"\n").unwrap_err();
        assert!(err.to_string().contains("not both"));
    }

    #[test]
    fn digest_ignores_output_dir() {
        let a = RunConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.digest(), b.digest());
        b.seed = 9;
        assert_ne!(a.digest(), b.digest());
    }
}
