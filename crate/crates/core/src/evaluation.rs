//! Metrics, the model registry, cross-validation, grid search, benchmark
//! reports and the model file format.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Read;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_dt_mean, fit_gb, fit_rf, BoostedModel, BoostingParams, DecisionTreeModel, ForestModel, ForestParams};
use crate::composite::{outer_levels, CompositeKind, CompositeParams, CompositeQuantileModel, PredictionInterval, DEFAULT_QUANTILES};
use crate::data::{split_kfold, CategoricalEncoding, ColumnKind, Dataset, EncodedMatrix, FeatureSchema, Fold, Value};
use crate::error::{invalid, Error, Result};
use crate::linear::{fit_quantile_with, fit_ridge_with, LinearFitOptions, LinearPredictor, LinearQuantileModel, RidgeModel};
use crate::partition::TreeParams;
use crate::pipeline::{prune_caps, select_features, Imputer, SelectionThresholds};

fn abs_errors(pred: &[f64], actual: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != actual.len() {
        return Err(Error::DimensionMismatch { expected: actual.len(), got: pred.len() });
    }
    if pred.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(pred.iter().zip(actual).map(|(p, a)| (p - a).abs()).collect())
}

fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median_ae(pred: &[f64], actual: &[f64]) -> Result<f64> {
    abs_errors(pred, actual).map(median_of)
}

pub fn mean_ae(pred: &[f64], actual: &[f64]) -> Result<f64> {
    let e = abs_errors(pred, actual)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Percentage of actuals inside their interval, bounds inclusive.
pub fn interval_coverage(intervals: &[PredictionInterval], actual: &[f64]) -> Result<f64> {
    if intervals.len() != actual.len() {
        return Err(Error::DimensionMismatch { expected: actual.len(), got: intervals.len() });
    }
    if actual.is_empty() {
        return Err(Error::EmptyData);
    }
    let hits = intervals.iter().zip(actual).filter(|(iv, y)| iv.contains(**y)).count();
    Ok(100.0 * hits as f64 / actual.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ridge,
    QuantileRegression,
    DecisionTree,
    RandomForest,
    Qrf,
    GradientBoosting,
    QuantileTree,
    PiecewiseQr,
    PiecewiseRr,
    NnQr,
}

impl ModelKind {
    /// All models in report row order.
    pub const ALL: [ModelKind; 10] = [
        ModelKind::Ridge,
        ModelKind::QuantileRegression,
        ModelKind::DecisionTree,
        ModelKind::RandomForest,
        ModelKind::Qrf,
        ModelKind::GradientBoosting,
        ModelKind::QuantileTree,
        ModelKind::PiecewiseQr,
        ModelKind::PiecewiseRr,
        ModelKind::NnQr,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Ridge => "Ridge Regressor",
            ModelKind::QuantileRegression => "Quantile Regressor",
            ModelKind::DecisionTree => "Decision Tree Regressor",
            ModelKind::RandomForest => "Random Forest Regressor",
            ModelKind::Qrf => "QRF",
            ModelKind::GradientBoosting => "Gradient Boosting Regressor",
            ModelKind::QuantileTree => "Quantile Tree",
            ModelKind::PiecewiseQr => "Piecewise QR",
            ModelKind::PiecewiseRr => "Piecewise RR",
            ModelKind::NnQr => "Nearest Neighbor QR",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ModelKind::Ridge => "ridge",
            ModelKind::QuantileRegression => "quantile_regression",
            ModelKind::DecisionTree => "decision_tree",
            ModelKind::RandomForest => "random_forest",
            ModelKind::Qrf => "qrf",
            ModelKind::GradientBoosting => "gradient_boosting",
            ModelKind::QuantileTree => "quantile_tree",
            ModelKind::PiecewiseQr => "piecewise_qr",
            ModelKind::PiecewiseRr => "piecewise_rr",
            ModelKind::NnQr => "nn_qr",
        }
    }

    /// Whether the model emits prediction intervals.
    pub fn has_intervals(self) -> bool {
        matches!(self, ModelKind::QuantileRegression | ModelKind::Qrf | ModelKind::QuantileTree | ModelKind::PiecewiseQr | ModelKind::NnQr)
    }

    fn composite(self) -> Option<CompositeKind> {
        match self {
            ModelKind::QuantileTree => Some(CompositeKind::QuantileTree),
            ModelKind::PiecewiseQr => Some(CompositeKind::PiecewiseQr),
            ModelKind::PiecewiseRr => Some(CompositeKind::PiecewiseRr),
            ModelKind::NnQr => Some(CompositeKind::NnQr),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| invalid(format!("unknown model `{s}`; expected one of {}", ModelKind::ALL.map(|k| k.key()).join(", "))))
    }
}

/// One hyperparameter combination; fields not used by a model are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub min_samples_split: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_clusters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_estimators: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_neighbors: Option<usize>,
}

impl fmt::Display for HyperParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        let mut push = |name: &str, v: Option<String>| {
            if let Some(v) = v {
                parts.push(format!("{name}={v}"));
            }
        };
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("max_depth", self.max_depth.map(|v| v.to_string()));
        push("min_samples_split", self.min_samples_split.map(|v| v.to_string()));
        push("n_clusters", self.n_clusters.map(|v| v.to_string()));
        push("n_estimators", self.n_estimators.map(|v| v.to_string()));
        push("learning_rate", self.learning_rate.map(|v| v.to_string()));
        push("n_neighbors", self.n_neighbors.map(|v| v.to_string()));
        f.write_str(&parts.join(" "))
    }
}

/// Candidate values per hyperparameter plus settings held fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperGrid {
    pub lambda: Vec<f64>,
    pub max_depth: Vec<usize>,
    pub min_samples_split: Vec<usize>,
    pub n_clusters: Vec<usize>,
    pub n_estimators: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub n_neighbors: Vec<usize>,
    pub forest_trees: usize,
    pub gb_max_depth: usize,
    pub quantiles: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            lambda: vec![0.001, 0.01, 0.1, 1.0, 10.0],
            max_depth: vec![2, 4, 6, 8],
            min_samples_split: vec![10, 30, 100],
            n_clusters: vec![2, 4, 8, 16],
            n_estimators: vec![50, 100],
            learning_rate: vec![0.05, 0.1],
            n_neighbors: vec![25, 50, 100],
            forest_trees: 100,
            gb_max_depth: 5,
            quantiles: DEFAULT_QUANTILES.to_vec(),
        }
    }
}

fn nonempty<T>(name: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        return Err(invalid(format!("hyperparameter grid `{name}` is empty")));
    }
    Ok(())
}

impl HyperGrid {
    /// Every combination for `kind`, in grid order.
    pub fn combinations(&self, kind: ModelKind) -> Result<Vec<HyperParams>> {
        let h = HyperParams::default;
        let lambdas = || -> Result<Vec<HyperParams>> {
            nonempty("lambda", &self.lambda)?;
            Ok(self.lambda.iter().map(|&l| HyperParams { lambda: Some(l), ..h() }).collect())
        };
        let trees = |base: Vec<HyperParams>| -> Result<Vec<HyperParams>> {
            nonempty("max_depth", &self.max_depth)?;
            nonempty("min_samples_split", &self.min_samples_split)?;
            Ok(base
                .into_iter()
                .flat_map(|b| {
                    self.max_depth.iter().flat_map(move |&d| {
                        let b = b.clone();
                        self.min_samples_split
                            .iter()
                            .map(move |&m| HyperParams { max_depth: Some(d), min_samples_split: Some(m), ..b.clone() })
                    })
                })
                .collect())
        };
        match kind {
            ModelKind::Ridge | ModelKind::QuantileRegression => lambdas(),
            ModelKind::DecisionTree | ModelKind::RandomForest | ModelKind::Qrf => trees(vec![h()]),
            ModelKind::QuantileTree => trees(lambdas()?),
            ModelKind::GradientBoosting => {
                nonempty("n_estimators", &self.n_estimators)?;
                nonempty("learning_rate", &self.learning_rate)?;
                Ok(self
                    .n_estimators
                    .iter()
                    .flat_map(|&m| {
                        self.learning_rate.iter().map(move |&lr| HyperParams { n_estimators: Some(m), learning_rate: Some(lr), ..h() })
                    })
                    .collect())
            }
            ModelKind::PiecewiseQr | ModelKind::PiecewiseRr => {
                nonempty("n_clusters", &self.n_clusters)?;
                Ok(lambdas()?
                    .into_iter()
                    .flat_map(|b| self.n_clusters.iter().map(move |&k| HyperParams { n_clusters: Some(k), ..b.clone() }))
                    .collect())
            }
            ModelKind::NnQr => {
                nonempty("n_neighbors", &self.n_neighbors)?;
                Ok(lambdas()?
                    .into_iter()
                    .flat_map(|b| self.n_neighbors.iter().map(move |&k| HyperParams { n_neighbors: Some(k), ..b.clone() }))
                    .collect())
            }
        }
    }

    pub fn settings(&self, seed: u64) -> Result<FitSettings> {
        outer_levels(&self.quantiles)?;
        if self.quantiles.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(invalid("quantile levels must lie in (0, 1)"));
        }
        let mut quantiles = self.quantiles.clone();
        quantiles.sort_by(f64::total_cmp);
        quantiles.dedup();
        Ok(FitSettings { quantiles, forest_trees: self.forest_trees, gb_max_depth: self.gb_max_depth, seed })
    }
}

/// Settings shared by every fit in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub quantiles: Vec<f64>,
    pub forest_trees: usize,
    pub gb_max_depth: usize,
    pub seed: u64,
}

impl Default for FitSettings {
    fn default() -> Self {
        HyperGrid::default().settings(0).expect("default grid is valid")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelBody {
    Ridge { model: RidgeModel },
    Quantile { models: Vec<LinearQuantileModel> },
    Tree { model: DecisionTreeModel },
    Forest { model: ForestModel },
    Boosted { model: BoostedModel },
    Composite { model: CompositeQuantileModel },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub median: f64,
    pub interval: Option<PredictionInterval>,
}

impl Prediction {
    /// The interval, or a zero-width one at the point prediction.
    pub fn bounds(&self) -> PredictionInterval {
        self.interval.unwrap_or(PredictionInterval { lower: self.median, median: self.median, upper: self.median })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub kind: ModelKind,
    pub hyperparameters: HyperParams,
    pub quantiles: Vec<f64>,
    pub encoding: CategoricalEncoding,
    pub body: ModelBody,
}

fn need<T: Copy>(v: Option<T>, name: &str, kind: ModelKind) -> Result<T> {
    v.ok_or_else(|| invalid(format!("{kind} needs hyperparameter `{name}`")))
}

fn tree_params(hp: &HyperParams, kind: ModelKind) -> Result<TreeParams> {
    Ok(TreeParams::new(need(hp.max_depth, "max_depth", kind)?, need(hp.min_samples_split, "min_samples_split", kind)?, 1))
}

/// Fits `kind` on an imputed dataset.
pub fn fit_model(kind: ModelKind, hp: &HyperParams, dataset: &Dataset, settings: &FitSettings) -> Result<FittedModel> {
    let opts = LinearFitOptions::STANDARDIZED;
    let q = settings.quantiles.clone();
    let (body, encoding) = if let Some(ck) = kind.composite() {
        let params = CompositeParams {
            lambda: need(hp.lambda, "lambda", kind)?,
            tree: match kind {
                ModelKind::QuantileTree => tree_params(hp, kind)?,
                _ => TreeParams::default(),
            },
            n_clusters: hp.n_clusters.unwrap_or(1),
            n_neighbors: hp.n_neighbors.unwrap_or(1),
            quantiles: q.clone(),
            seed: settings.seed,
            standardize: true,
        };
        let model = CompositeQuantileModel::fit(ck, dataset, &params)?;
        let encoding = model.encoding().clone();
        (ModelBody::Composite { model }, encoding)
    } else {
        let (x, y, encoding) = crate::data::encode(dataset, None)?;
        let body = match kind {
            ModelKind::Ridge => ModelBody::Ridge { model: fit_ridge_with(&x, &y, need(hp.lambda, "lambda", kind)?, opts)? },
            ModelKind::QuantileRegression => {
                let l = need(hp.lambda, "lambda", kind)?;
                ModelBody::Quantile { models: q.iter().map(|&a| fit_quantile_with(&x, &y, a, l, opts)).collect::<Result<_>>()? }
            }
            ModelKind::DecisionTree => ModelBody::Tree { model: fit_dt_mean(&x, &y, tree_params(hp, kind)?)? },
            ModelKind::RandomForest | ModelKind::Qrf => {
                let params = ForestParams {
                    n_trees: settings.forest_trees,
                    tree: tree_params(hp, kind)?,
                    bootstrap: true,
                    feature_fraction: 1.0,
                    seed: settings.seed,
                };
                ModelBody::Forest { model: fit_rf(&x, &y, params)? }
            }
            ModelKind::GradientBoosting => {
                let params = BoostingParams {
                    n_stages: need(hp.n_estimators, "n_estimators", kind)?,
                    learning_rate: need(hp.learning_rate, "learning_rate", kind)?,
                    tree: TreeParams::new(settings.gb_max_depth, 2, 1),
                };
                ModelBody::Boosted { model: fit_gb(&x, &y, params)? }
            }
            _ => unreachable!("composite kinds handled above"),
        };
        (body, encoding)
    };
    Ok(FittedModel { kind, hyperparameters: hp.clone(), quantiles: q, encoding, body })
}

fn level_index(levels: &[f64], alpha: f64) -> Result<usize> {
    levels.iter().position(|a| (a - alpha).abs() < 1e-12).ok_or_else(|| invalid(format!("model was not fitted at level {alpha}")))
}

impl FittedModel {
    pub fn n_features(&self) -> usize {
        self.encoding.width()
    }

    /// Point prediction and, for quantile-capable models, the interval.
    pub fn predict_encoded(&self, x: &[f64]) -> Result<Prediction> {
        if x.len() != self.n_features() {
            return Err(Error::DimensionMismatch { expected: self.n_features(), got: x.len() });
        }
        let point = |median: f64| Ok(Prediction { median, interval: None });
        match &self.body {
            ModelBody::Ridge { model } => point(model.predict(x)?),
            ModelBody::Tree { model } => point(model.predict(x)?),
            ModelBody::Boosted { model } => point(model.predict(x)?),
            ModelBody::Forest { model } if self.kind == ModelKind::RandomForest => point(model.predict(x)?),
            ModelBody::Forest { model } => {
                let (lo, hi) = outer_levels(&self.quantiles)?;
                let iv = PredictionInterval::rearranged(model.qrf_predict(x, lo)?, model.qrf_predict(x, 0.5)?, model.qrf_predict(x, hi)?);
                Ok(Prediction { median: iv.median, interval: Some(iv) })
            }
            ModelBody::Quantile { models } => {
                let (lo, hi) = outer_levels(&self.quantiles)?;
                let at = |a: f64| -> Result<f64> { models[level_index(&self.quantiles, a)?].predict(x) };
                let iv = PredictionInterval::rearranged(at(lo)?, at(0.5)?, at(hi)?);
                Ok(Prediction { median: iv.median, interval: Some(iv) })
            }
            ModelBody::Composite { model } => {
                if model.kind() == CompositeKind::PiecewiseRr {
                    point(model.predict_encoded(x, 0.5)?)
                } else {
                    let iv = model.predict_interval_encoded(x)?;
                    Ok(Prediction { median: iv.median, interval: Some(iv) })
                }
            }
        }
    }

    pub fn predict_matrix(&self, x: &EncodedMatrix) -> Result<Vec<Prediction>> {
        x.rows().map(|r| self.predict_encoded(r)).collect()
    }

    /// Median-only prediction; cheaper than [`Self::predict_encoded`] for
    /// quantile models.
    pub fn predict_median_encoded(&self, x: &[f64]) -> Result<f64> {
        match &self.body {
            ModelBody::Quantile { models } => {
                if x.len() != self.n_features() {
                    return Err(Error::DimensionMismatch { expected: self.n_features(), got: x.len() });
                }
                models[level_index(&self.quantiles, 0.5)?].predict(x)
            }
            ModelBody::Forest { model } if self.kind == ModelKind::Qrf => model.qrf_predict(x, 0.5),
            ModelBody::Composite { model } => model.predict_encoded(x, 0.5),
            _ => self.predict_encoded(x).map(|p| p.median),
        }
    }

    /// Parameter count; `None` when not applicable (nearest-neighbor QR).
    pub fn param_count(&self) -> Option<usize> {
        let p = self.n_features();
        match &self.body {
            ModelBody::Ridge { .. } => Some(p + 1),
            ModelBody::Quantile { models } => Some(models.len() * (p + 1)),
            ModelBody::Tree { model } => Some(model.param_count()),
            ModelBody::Forest { model } => Some(model.param_count()),
            ModelBody::Boosted { model } => Some(model.param_count()),
            ModelBody::Composite { model } => model.count_parameters(),
        }
    }
}

/// Fold-level preprocessing settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    /// Tail caps, applied to training rows only.
    pub caps: BTreeMap<String, f64>,
    /// Also compute intervals (quantile-capable models).
    pub intervals: bool,
    /// Feature filters, scored on training rows only.
    #[serde(default)]
    pub selection: SelectionThresholds,
}

/// Outcome of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    /// Indices into the cross-validated dataset.
    pub test_rows: Vec<usize>,
    pub predictions: Vec<f64>,
    pub intervals: Option<Vec<PredictionInterval>>,
    pub actual: Vec<f64>,
    pub median_ae: f64,
    pub mean_ae: f64,
    pub param_count: Option<usize>,
    pub pruned: usize,
    pub imputer: Imputer,
    pub encoding: CategoricalEncoding,
}

/// Pruned, imputed and filtered training data, the imputer learned on it and
/// the number of pruned rows.
pub fn prepare_training(train: &Dataset, opts: &CvOptions) -> Result<(Dataset, Imputer, usize)> {
    let (pruned, report) = prune_caps(train, &opts.caps)?;
    if pruned.is_empty() {
        return Err(Error::EmptyData);
    }
    let imputer = Imputer::fit(&pruned);
    let imputed = imputer.transform(&pruned)?;
    let selected = if opts.selection.is_active() { select_features(&imputed, &opts.selection)?.0 } else { imputed };
    Ok((selected, imputer, report.removed))
}

pub fn evaluate_fold(
    kind: ModelKind,
    hp: &HyperParams,
    dataset: &Dataset,
    fold_index: usize,
    fold: &Fold,
    settings: &FitSettings,
    opts: &CvOptions,
) -> Result<FoldResult> {
    let (train, imputer, pruned) = prepare_training(&dataset.select(&fold.train), opts)?;
    let model = fit_model(kind, hp, &train, settings)?;
    let test = imputer.transform(&dataset.select(&fold.test))?;
    let actual = test.target()?;
    let x = model.encoding.transform(&test)?;
    let (predictions, intervals) = if opts.intervals {
        let preds = model.predict_matrix(&x)?;
        (preds.iter().map(|p| p.median).collect(), preds.iter().map(|p| p.interval).collect::<Option<Vec<_>>>())
    } else {
        (x.rows().map(|r| model.predict_median_encoded(r)).collect::<Result<Vec<_>>>()?, None)
    };
    Ok(FoldResult {
        fold: fold_index,
        test_rows: fold.test.clone(),
        median_ae: median_ae(&predictions, &actual)?,
        mean_ae: mean_ae(&predictions, &actual)?,
        predictions,
        intervals,
        actual,
        param_count: model.param_count(),
        pruned,
        imputer,
        encoding: model.encoding,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    /// Over the pooled out-of-fold errors.
    pub median_ae: f64,
    pub mean_ae: f64,
    pub coverage_pct: Option<f64>,
}

impl CvResult {
    fn assemble(folds: Vec<FoldResult>) -> Result<Self> {
        let pred: Vec<f64> = folds.iter().flat_map(|f| f.predictions.iter().copied()).collect();
        let actual: Vec<f64> = folds.iter().flat_map(|f| f.actual.iter().copied()).collect();
        let intervals: Option<Vec<PredictionInterval>> =
            folds.iter().map(|f| f.intervals.clone()).collect::<Option<Vec<_>>>().map(|v| v.concat());
        Ok(Self {
            median_ae: median_ae(&pred, &actual)?,
            mean_ae: mean_ae(&pred, &actual)?,
            coverage_pct: intervals.map(|iv| interval_coverage(&iv, &actual)).transpose()?,
            folds,
        })
    }

    /// Mean parameter count over folds; `None` if any fold has none.
    pub fn mean_param_count(&self) -> Option<f64> {
        let counts = self.folds.iter().map(|f| f.param_count).collect::<Option<Vec<_>>>()?;
        Some(counts.iter().sum::<usize>() as f64 / counts.len() as f64)
    }

    /// Pooled out-of-fold rows as `(dataset row, lower, actual, upper)`,
    /// sorted by row.
    pub fn bounds(&self) -> Option<Vec<(usize, f64, f64, f64)>> {
        let mut out = Vec::new();
        for f in &self.folds {
            for ((row, iv), y) in f.test_rows.iter().zip(f.intervals.as_ref()?).zip(&f.actual) {
                out.push((*row, iv.lower, *y, iv.upper));
            }
        }
        out.sort_by_key(|r| r.0);
        Some(out)
    }
}

pub fn cross_validate(
    kind: ModelKind,
    hp: &HyperParams,
    dataset: &Dataset,
    k: usize,
    seed: u64,
    settings: &FitSettings,
    opts: &CvOptions,
) -> Result<CvResult> {
    dataset.target()?;
    let folds = split_kfold(dataset.len(), k, seed)?;
    let results = folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| evaluate_fold(kind, hp, dataset, i, f, settings, opts))
        .collect::<Result<Vec<_>>>()?;
    CvResult::assemble(results)
}

/// Cross-validated score of one grid combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEvaluation {
    pub hyperparams: HyperParams,
    pub median_ae: Option<f64>,
    pub mean_ae: Option<f64>,
    pub mean_param_count: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub kind: ModelKind,
    pub evaluations: Vec<GridEvaluation>,
    pub best: HyperParams,
    /// Cross-validation of the winner, with intervals where available.
    pub cv: CvResult,
    /// Winner refitted on the full (pruned, imputed) dataset.
    pub model: FittedModel,
    pub imputer: Imputer,
}

/// Index of the winning evaluation: lowest Median AE, then lower mean
/// parameter count, then the earlier entry. Failed entries never win.
pub fn select_best(evaluations: &[GridEvaluation]) -> Option<usize> {
    evaluations
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.median_ae.map(|m| (i, m, e.mean_param_count.unwrap_or(0.0))))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)))
        .map(|(i, ..)| i)
}

/// Exhaustive search. The winner has the lowest pooled Median AE; ties go to
/// the lower mean parameter count, then to the earlier combination.
pub fn grid_search(
    kind: ModelKind,
    grid: &HyperGrid,
    dataset: &Dataset,
    k: usize,
    seed: u64,
    opts: &CvOptions,
) -> Result<GridResult> {
    let settings = grid.settings(seed)?;
    let combos = grid.combinations(kind)?;
    dataset.target()?;
    let folds = split_kfold(dataset.len(), k, seed)?;
    let scoring = CvOptions { intervals: false, ..opts.clone() };
    let tasks: Vec<(usize, usize)> = (0..combos.len()).flat_map(|c| (0..folds.len()).map(move |f| (c, f))).collect();
    let results: Vec<Result<FoldResult>> = tasks
        .par_iter()
        .map(|&(c, f)| evaluate_fold(kind, &combos[c], dataset, f, &folds[f], &settings, &scoring))
        .collect();
    let mut per_combo: Vec<Vec<Result<FoldResult>>> = (0..combos.len()).map(|_| Vec::new()).collect();
    for ((c, _), r) in tasks.iter().zip(results) {
        per_combo[*c].push(r);
    }
    let evaluations: Vec<GridEvaluation> = combos
        .iter()
        .zip(per_combo)
        .map(|(hp, rs)| match rs.into_iter().collect::<Result<Vec<_>>>().and_then(CvResult::assemble) {
            Ok(cv) => GridEvaluation {
                hyperparams: hp.clone(),
                median_ae: Some(cv.median_ae),
                mean_ae: Some(cv.mean_ae),
                mean_param_count: cv.mean_param_count(),
                error: None,
            },
            Err(e) => {
                log::warn!("{kind} [{hp}] skipped: {e}");
                GridEvaluation { hyperparams: hp.clone(), median_ae: None, mean_ae: None, mean_param_count: None, error: Some(e.to_string()) }
            }
        })
        .collect();
    for e in &evaluations {
        if let Some(m) = e.median_ae {
            log::debug!("{kind} [{}] median_ae={m}", e.hyperparams);
        }
    }
    let best = select_best(&evaluations)
        .map(|i| evaluations[i].hyperparams.clone())
        .ok_or_else(|| invalid(format!("every {kind} grid combination failed")))?;
    let cv = if kind.has_intervals() {
        cross_validate(kind, &best, dataset, k, seed, &settings, &CvOptions { intervals: true, ..opts.clone() })?
    } else {
        cross_validate(kind, &best, dataset, k, seed, &settings, &scoring)?
    };
    let (train, imputer, _) = prepare_training(dataset, opts)?;
    let model = fit_model(kind, &best, &train, &settings)?;
    Ok(GridResult { kind, evaluations, best, cv, model, imputer })
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetric {
    pub fold: usize,
    pub n_test: usize,
    pub median_ae: f64,
    pub mean_ae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub kind: ModelKind,
    pub median_ae: f64,
    pub mean_ae: f64,
    pub param_count: Option<usize>,
    pub coverage_pct: Option<f64>,
    pub fold_metrics: Vec<FoldMetric>,
    pub chosen_hyperparams: HyperParams,
    pub grid_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub units: String,
    pub n_rows: usize,
    pub folds: usize,
    pub seed: u64,
    pub notes: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn row(&self, kind: ModelKind) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    pub fn to_text(&self) -> String {
        let units = if self.units.is_empty() { String::new() } else { format!(" ({})", self.units) };
        let headers =
            ["Approach".to_string(), format!("Median AE{units}"), format!("Mean AE{units}"), "Parameters".into(), "Coverage %".into()];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    format!("{:.4}", r.median_ae),
                    format!("{:.4}", r.mean_ae),
                    r.param_count.map_or("NA".into(), |p| p.to_string()),
                    r.coverage_pct.map_or("NA".into(), |c| format!("{c:.4}")),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..5).map(|c| cells.iter().map(|r| r[c].len()).chain([headers[c].len()]).max().unwrap_or(0)).collect();
        let line = |row: &[String]| -> String {
            let mut s = format!("{:<w$}", row[0], w = widths[0]);
            for c in 1..5 {
                let _ = write!(s, "  {:>w$}", row[c], w = widths[c]);
            }
            s.trim_end().to_string() + "\n"
        };
        let rule = "-".repeat(widths.iter().sum::<usize>() + 8) + "\n";
        let mut out = format!("{} rows, {}-fold cross-validation, seed {}\n", self.n_rows, self.folds, self.seed);
        out += &rule;
        out += &line(&headers);
        out += &rule;
        for r in &cells {
            out += &line(r);
        }
        out += &rule;
        for n in &self.notes {
            out += &format!("note: {n}\n");
        }
        out
    }
}

/// Everything a benchmark run produces.
pub struct BenchmarkOutcome {
    pub report: EvaluationReport,
    pub results: Vec<GridResult>,
}

pub const PRUNING_NOTE: &str =
    "rows above a tail cap are removed from training folds, not clipped; clipping would pile mass at the cap and bias upper quantiles";

/// Grid search per model, rows in the order given.
pub fn benchmark(
    dataset: &Dataset,
    models: &[ModelKind],
    grid: &HyperGrid,
    k: usize,
    seed: u64,
    opts: &CvOptions,
) -> Result<BenchmarkOutcome> {
    if models.is_empty() {
        return Err(invalid("benchmark needs at least one model"));
    }
    let mut results = Vec::with_capacity(models.len());
    for &kind in models {
        log::info!("benchmarking {kind}");
        results.push(grid_search(kind, grid, dataset, k, seed, opts)?);
    }
    let rows = results
        .iter()
        .map(|r| ReportRow {
            model: r.kind.display_name().to_string(),
            kind: r.kind,
            median_ae: round4(r.cv.median_ae),
            mean_ae: round4(r.cv.mean_ae),
            param_count: r.model.param_count(),
            coverage_pct: r.cv.coverage_pct.map(round4),
            fold_metrics: r
                .cv
                .folds
                .iter()
                .map(|f| FoldMetric { fold: f.fold, n_test: f.actual.len(), median_ae: round4(f.median_ae), mean_ae: round4(f.mean_ae) })
                .collect(),
            chosen_hyperparams: r.best.clone(),
            grid_size: r.evaluations.len(),
        })
        .collect();
    let mut notes = Vec::new();
    if !opts.caps.is_empty() {
        let caps: Vec<String> = opts.caps.iter().map(|(c, v)| format!("{c} <= {v}")).collect();
        notes.push(format!("{PRUNING_NOTE} (caps: {})", caps.join(", ")));
    }
    let report = EvaluationReport {
        units: dataset.schema().units().to_string(),
        n_rows: dataset.len(),
        folds: k,
        seed,
        notes,
        rows,
    };
    Ok(BenchmarkOutcome { report, results })
}

/// Writes `row,lower,actual,upper` lines.
pub fn bounds_csv(bounds: &[(usize, f64, f64, f64)]) -> String {
    let mut s = String::from("row,lower,actual,upper\n");
    for (r, lo, y, hi) in bounds {
        let _ = writeln!(s, "{r},{lo},{y},{hi}");
    }
    s
}

pub const FORMAT_VERSION: u32 = 1;

/// Serialized model: raw input schema, fitted preprocessing and the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub kind: ModelKind,
    pub schema: FeatureSchema,
    pub imputer: Imputer,
    pub hyperparameters: HyperParams,
    pub model: FittedModel,
}

impl ModelFile {
    pub fn new(schema: FeatureSchema, imputer: Imputer, model: FittedModel) -> Self {
        Self { format_version: FORMAT_VERSION, kind: model.kind, hyperparameters: model.hyperparameters.clone(), schema, imputer, model }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported model format version {}", file.format_version)));
        }
        if file.kind != file.model.kind {
            return Err(Error::Schema("model kind does not match its body".into()));
        }
        Ok(file)
    }

    /// Reads prediction input laid out by header names. Columns the model
    /// uses must be present; the target and identifiers may be absent.
    pub fn read_input<R: Read>(&self, reader: R, delimiter: u8) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let positions: Vec<Option<usize>> =
            self.schema.columns().iter().map(|c| header.iter().position(|h| *h == c.name)).collect();
        let needed: Vec<String> = self.model.encoding.predictors().iter().map(|p| p.name().to_string()).collect();
        let missing: Vec<String> = self
            .schema
            .columns()
            .iter()
            .zip(&positions)
            .filter(|(c, p)| p.is_none() && needed.contains(&c.name))
            .map(|(c, _)| c.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingColumns(missing));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = self
                .schema
                .columns()
                .iter()
                .zip(&positions)
                .map(|(c, p)| {
                    let raw = p.and_then(|j| rec.get(j)).unwrap_or("");
                    if raw.is_empty() {
                        return Ok(Value::Missing);
                    }
                    match c.kind {
                        ColumnKind::Numeric => raw
                            .parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .map(Value::Number)
                            .ok_or_else(|| Error::Parse(format!("row {}: `{raw}` in numeric column `{}`", i + 1, c.name))),
                        _ => Ok(Value::Text(raw.to_string())),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Dataset::new(self.schema.clone(), rows)
    }

    /// Predictions for rows laid out by the model's schema.
    pub fn predict(&self, dataset: &Dataset) -> Result<Vec<Prediction>> {
        let missing = self.model.encoding.missing_columns(dataset.schema());
        if !missing.is_empty() {
            return Err(Error::MissingColumns(missing));
        }
        let imputed = self.imputer.transform(dataset)?;
        let x = self.model.encoding.transform(&imputed)?;
        self.model.predict_matrix(&x)
    }
}
