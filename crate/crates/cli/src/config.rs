//! Run configuration, read from TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use milestone_forecast::evaluation::{HyperGrid, ModelKind};
use milestone_forecast::pipeline::SelectionThresholds;
use milestone_forecast::synthetic::SyntheticSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    MilestoneCsv,
    GwaTrace,
    GenericCsv,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    /// File, or for `gwa-trace` a file or a directory of per-VM files.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Field delimiter; defaults to `;` for GWA traces and `,` otherwise.
    #[serde(default)]
    pub delimiter: Option<char>,
    /// Target column (generic CSV only).
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub units: Option<String>,
    /// Column kind overrides (generic CSV only).
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub numeric: Vec<String>,
    #[serde(default)]
    pub identifier: Vec<String>,
    /// Reads at most this many trace files (sorted by name).
    #[serde(default)]
    pub max_files: Option<usize>,
    /// Generator settings for `synthetic`.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Milestone names (milestone CSV only).
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub intermediates: Vec<String>,
    #[serde(default)]
    pub target: Option<String>,
    /// `state,climate` or `region,climate` lookup table.
    #[serde(default)]
    pub climate: Option<PathBuf>,
    /// Training rows above a cap are removed in every fold.
    #[serde(default)]
    pub caps: BTreeMap<String, f64>,
    #[serde(default)]
    pub selection: SelectionThresholds,
    #[serde(default = "default_lags")]
    pub lags: usize,
}

fn default_lags() -> usize {
    3
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Defaults to the model path with a `.fit.json` extension.
    #[serde(default)]
    pub fit_report: Option<PathBuf>,
    #[serde(default)]
    pub report_json: Option<PathBuf>,
    #[serde(default)]
    pub report_text: Option<PathBuf>,
    /// Directory for per-model `lower, actual, upper` files.
    #[serde(default)]
    pub bounds_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Model trained by `train`.
    #[serde(default = "default_model")]
    pub model: ModelKind,
    /// Rows of a benchmark report, in order.
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    pub data: DataConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub grid: HyperGrid,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_folds() -> usize {
    5
}

fn default_model() -> ModelKind {
    ModelKind::QuantileTree
}

fn default_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input { path: path.to_path_buf(), reason: e.to_string() })?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        resolve(base, &mut cfg.data.path);
        resolve(base, &mut cfg.pipeline.climate);
        for p in [
            &mut cfg.output.model,
            &mut cfg.output.fit_report,
            &mut cfg.output.report_json,
            &mut cfg.output.report_text,
            &mut cfg.output.bounds_dir,
        ] {
            resolve(base, p);
        }
        Ok(cfg)
    }

    /// Checks settings and that every input path exists.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.folds < 2 {
            return Err(CliError::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.models.is_empty() {
            return Err(CliError::Config("models list is empty".into()));
        }
        match (self.data.format, &self.data.path) {
            (DataFormat::Synthetic, _) => {}
            (_, None) => return Err(CliError::Config("data.path is required for this format".into())),
            (_, Some(p)) if !p.exists() => {
                return Err(CliError::Input { path: p.clone(), reason: "data path does not exist".into() })
            }
            _ => {}
        }
        if let Some(p) = &self.pipeline.climate {
            if !p.exists() {
                return Err(CliError::Input { path: p.clone(), reason: "climate table does not exist".into() });
            }
        }
        if self.data.format == DataFormat::GenericCsv && self.data.target.is_none() {
            return Err(CliError::Config("data.target is required for generic-csv".into()));
        }
        if self.data.format == DataFormat::MilestoneCsv && (self.pipeline.source.is_none() || self.pipeline.target.is_none()) {
            return Err(CliError::Config("pipeline.source and pipeline.target are required for milestone-csv".into()));
        }
        if let Some(d) = self.data.delimiter {
            if !d.is_ascii() {
                return Err(CliError::Config(format!("delimiter `{d}` is not a single ASCII character")));
            }
        }
        Ok(())
    }

    pub fn delimiter(&self) -> u8 {
        match (self.data.delimiter, self.data.format) {
            (Some(d), _) => d as u8,
            (None, DataFormat::GwaTrace) => b';',
            (None, _) => b',',
        }
    }
}
