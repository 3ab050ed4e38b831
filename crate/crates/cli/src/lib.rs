//! Command implementations behind the `mforecast` binary.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use milestone_forecast::data::{read_csv, ColumnKind, CsvOptions, Dataset};
use milestone_forecast::evaluation::{benchmark, bounds_csv, grid_search, CvOptions, EvaluationReport, GridEvaluation, HyperParams, ModelBody, ModelFile, ModelKind};
use milestone_forecast::pipeline::{build_gwa_dataset, build_milestone_dataset, read_gwa_trace, read_milestones, ClimateTable, MilestoneConfig};
use milestone_forecast::synthetic::{generate_synthetic, SyntheticSpec};
use serde::Serialize;
use thiserror::Error;

pub use config::{DataConfig, DataFormat, OutputConfig, PipelineConfig, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {reason}", .path.display())]
    Input { path: PathBuf, reason: String },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: milestone_forecast::Error,
    },
    #[error("writing {}: {source}", .path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for bad input or configuration, 1 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input { .. } => 2,
            CliError::Stage { source, .. } => match source {
                milestone_forecast::Error::Numerical(_) => 1,
                milestone_forecast::Error::Io(e) if e.kind() != std::io::ErrorKind::NotFound => 1,
                _ => 2,
            },
            CliError::Output { .. } => 1,
        }
    }
}

fn stage(name: &'static str) -> impl FnOnce(milestone_forecast::Error) -> CliError {
    move |source| CliError::Stage { stage: name, source }
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Input { path: path.to_path_buf(), reason: e.to_string() })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    let err = |source| CliError::Output { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(err)?;
    }
    fs::write(path, contents).map_err(err)
}

/// Per-VM trace files: the path itself, or every `.csv` in it sorted by name.
fn trace_files(path: &Path, limit: Option<usize>) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|e| CliError::Input { path: path.to_path_buf(), reason: e.to_string() })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if let Some(n) = limit {
        files.truncate(n);
    }
    if files.is_empty() {
        return Err(CliError::Input { path: path.to_path_buf(), reason: "no .csv trace files".into() });
    }
    Ok(files)
}

/// Builds the modelling table for the configured source. Rows with a
/// missing target are dropped.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    cfg.validate()?;
    let delim = cfg.delimiter();
    let path = cfg.data.path.as_deref();
    let ds = match cfg.data.format {
        DataFormat::Synthetic => {
            let spec = cfg.data.synthetic.clone().unwrap_or_else(|| SyntheticSpec { seed: cfg.seed, ..Default::default() });
            generate_synthetic(&spec).map_err(stage("synthetic data"))?
        }
        DataFormat::GenericCsv => {
            let mut opts = CsvOptions::new(cfg.data.target.clone().unwrap_or_default());
            opts.delimiter = delim;
            opts.units = cfg.data.units.clone().unwrap_or_default();
            for (names, kind) in
                [(&cfg.data.categorical, ColumnKind::Categorical), (&cfg.data.numeric, ColumnKind::Numeric), (&cfg.data.identifier, ColumnKind::Identifier)]
            {
                for n in names {
                    opts.kinds.insert(n.clone(), kind);
                }
            }
            let p = path.expect("validated");
            read_csv(open(p)?, &opts).map_err(stage("reading data"))?
        }
        DataFormat::MilestoneCsv => {
            let p = path.expect("validated");
            let records = read_milestones(open(p)?, delim).map_err(stage("reading milestones"))?;
            let climate = match &cfg.pipeline.climate {
                Some(c) => Some(ClimateTable::from_csv(open(c)?).map_err(stage("reading climate table"))?),
                None => None,
            };
            let mc = MilestoneConfig {
                source: cfg.pipeline.source.clone().unwrap_or_default(),
                intermediates: cfg.pipeline.intermediates.clone(),
                target: cfg.pipeline.target.clone().unwrap_or_default(),
            };
            let (ds, report) = build_milestone_dataset(&records, &mc, climate.as_ref()).map_err(stage("building milestone table"))?;
            log::info!("milestone table: {} projects kept, exclusions {report:?}", ds.len());
            ds
        }
        DataFormat::GwaTrace => {
            let mut traces = Vec::new();
            for f in trace_files(path.expect("validated"), cfg.data.max_files)? {
                let vm = f.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                traces.push(read_gwa_trace(open(&f)?, &vm, delim).map_err(stage("reading trace"))?);
            }
            build_gwa_dataset(&traces, cfg.pipeline.lags).map_err(stage("building lag table"))?
        }
    };
    let t = ds.schema().target_index();
    let kept = ds.filter_rows(|r| !r[t].is_missing());
    if kept.len() < ds.len() {
        log::warn!("dropped {} rows with a missing target", ds.len() - kept.len());
    }
    if kept.is_empty() {
        return Err(CliError::Stage { stage: "loading data", source: milestone_forecast::Error::EmptyData });
    }
    Ok(kept)
}

fn cv_options(cfg: &RunConfig) -> CvOptions {
    CvOptions { caps: cfg.pipeline.caps.clone(), intervals: false, selection: cfg.pipeline.selection }
}

fn output_path(configured: &Option<PathBuf>, default: &str) -> PathBuf {
    configured.clone().unwrap_or_else(|| PathBuf::from(default))
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub kind: ModelKind,
    pub n_rows: usize,
    pub folds: usize,
    pub seed: u64,
    pub best: HyperParams,
    pub median_ae: f64,
    pub mean_ae: f64,
    pub coverage_pct: Option<f64>,
    pub param_count: Option<usize>,
    pub evaluations: Vec<GridEvaluation>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model_path: PathBuf,
    pub report_path: PathBuf,
    pub report: FitReport,
}

/// Grid search, refit on all rows, then write the model and fit report.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let ds = load_dataset(cfg)?;
    let result = grid_search(cfg.model, &cfg.grid, &ds, cfg.folds, cfg.seed, &cv_options(cfg)).map_err(stage("grid search"))?;
    let file = ModelFile::new(ds.schema().clone(), result.imputer.clone(), result.model.clone());
    let report = FitReport {
        kind: cfg.model,
        n_rows: ds.len(),
        folds: cfg.folds,
        seed: cfg.seed,
        best: result.best.clone(),
        median_ae: result.cv.median_ae,
        mean_ae: result.cv.mean_ae,
        coverage_pct: result.cv.coverage_pct,
        param_count: result.model.param_count(),
        evaluations: result.evaluations,
    };
    let model_path = output_path(&cfg.output.model, "model.json");
    let report_path = cfg.output.fit_report.clone().unwrap_or_else(|| model_path.with_extension("fit.json"));
    write_file(&model_path, &file.to_json().map_err(stage("serializing model"))?)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| stage("serializing fit report")(e.into()))? + "\n";
    write_file(&report_path, &json)?;
    Ok(TrainOutcome { model_path, report_path, report })
}

pub fn load_model(path: &Path) -> Result<ModelFile, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input { path: path.to_path_buf(), reason: e.to_string() })?;
    ModelFile::from_json(&text).map_err(stage("reading model file"))
}

/// Writes `lower,median,upper` per input row. Point models repeat the median.
pub fn cmd_predict<W: Write>(model: &Path, input: &Path, delimiter: u8, out: W) -> Result<usize, CliError> {
    let file = load_model(model)?;
    let ds = file.read_input(open(input)?, delimiter).map_err(stage("reading prediction input"))?;
    let preds = file.predict(&ds).map_err(stage("predicting"))?;
    let mut w = BufWriter::new(out);
    let io = |source| CliError::Output { path: PathBuf::from("<prediction output>"), source };
    writeln!(w, "lower,median,upper").map_err(io)?;
    for p in &preds {
        let b = p.bounds();
        writeln!(w, "{},{},{}", b.lower, b.median, b.upper).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(preds.len())
}

#[derive(Debug)]
pub struct BenchmarkFiles {
    pub report: EvaluationReport,
    pub json_path: PathBuf,
    pub text_path: PathBuf,
    pub bounds: Vec<PathBuf>,
}

pub fn cmd_benchmark(cfg: &RunConfig) -> Result<BenchmarkFiles, CliError> {
    let ds = load_dataset(cfg)?;
    let outcome = benchmark(&ds, &cfg.models, &cfg.grid, cfg.folds, cfg.seed, &cv_options(cfg)).map_err(stage("benchmark"))?;
    let json_path = output_path(&cfg.output.report_json, "report.json");
    let text_path = output_path(&cfg.output.report_text, "report.txt");
    write_file(&json_path, &outcome.report.to_json().map_err(stage("serializing report"))?)?;
    write_file(&text_path, &outcome.report.to_text())?;
    let mut bounds = Vec::new();
    if let Some(dir) = &cfg.output.bounds_dir {
        for r in &outcome.results {
            if let Some(b) = r.cv.bounds() {
                let p = dir.join(format!("{}_bounds.csv", r.kind.key()));
                write_file(&p, &bounds_csv(&b))?;
                bounds.push(p);
            }
        }
    }
    Ok(BenchmarkFiles { report: outcome.report, json_path, text_path, bounds })
}

/// Levels stored in the ground-truth sidecar.
pub const SIDECAR_QUANTILES: [f64; 3] = [0.05, 0.5, 0.95];

/// Reads a generator spec (TOML; missing fields take defaults) and writes
/// the data CSV plus a JSON sidecar with the true quantile parameters.
pub fn cmd_synth(spec_path: Option<&Path>, n: Option<usize>, seed: Option<u64>, out: &Path, truth: &Path) -> Result<usize, CliError> {
    let mut spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Input { path: p.to_path_buf(), reason: e.to_string() })?;
            toml::from_str::<SyntheticSpec>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(n) = n {
        spec.n_projects = n;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = generate_synthetic(&spec).map_err(stage("generating data"))?;
    let mut buf = Vec::new();
    ds.write_csv(&mut buf, b',').map_err(stage("writing data"))?;
    write_file(out, &String::from_utf8(buf).expect("csv output is utf-8"))?;
    let sidecar = serde_json::to_string_pretty(&spec.truth(&SIDECAR_QUANTILES)).map_err(|e| stage("serializing sidecar")(e.into()))?;
    write_file(truth, &(sidecar + "\n"))?;
    Ok(ds.len())
}

/// Human-readable summary of a model file.
pub fn cmd_inspect(path: &Path) -> Result<String, CliError> {
    let file = load_model(path)?;
    let m = &file.model;
    let mut s = format!("model: {} ({})\nformat version: {}\n", m.kind.display_name(), m.kind.key(), file.format_version);
    s += &format!("hyperparameters: {}\n", m.hyperparameters);
    s += &format!("parameters: {}\n", m.param_count().map_or("NA".into(), |p| p.to_string()));
    if m.kind.has_intervals() {
        s += &format!("quantiles: {:?}\n", m.quantiles);
    }
    s += &format!("target: {} ({})\n", file.schema.target(), file.schema.units());
    s += &format!("encoded width: {}\n", m.encoding.width());
    for p in m.encoding.predictors() {
        s += &format!("  predictor {}\n", p.name());
    }
    if !file.imputer.medians.is_empty() {
        s += &format!("imputed medians: {}\n", file.imputer.medians.len());
    }
    if !file.imputer.dropped.is_empty() {
        s += &format!("dropped (all missing): {}\n", file.imputer.dropped.join(", "));
    }
    match &m.body {
        ModelBody::Composite { model } => {
            s += &format!("partitions: {}\n", model.partitions().len());
            let fallback = model.partitions().iter().filter(|p| p.fallback).count();
            if fallback > 0 {
                s += &format!("intercept-only partitions: {fallback}\n");
            }
        }
        ModelBody::Forest { model } => s += &format!("trees: {}\n", model.trees().len()),
        ModelBody::Boosted { model } => s += &format!("stages: {}\n", model.stages().len()),
        _ => {}
    }
    Ok(s)
}
