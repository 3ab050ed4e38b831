//! Composite models: a partitioner plus per-partition linear estimators.
//!
//! For a query row only the partition containing it contributes, so the
//! `alpha`-quantile prediction is `sum_i 1{x in P_i} * f_alpha^i(x)`.
//!
//! | kind           | partitioner                          | estimator |
//! |----------------|--------------------------------------|-----------|
//! | `quantile_tree`| CART on all encoded features         | QR        |
//! | `piecewise_qr` | k-means on categorical indicators    | QR        |
//! | `piecewise_rr` | k-means on categorical indicators    | ridge     |
//! | `nn_qr`        | k-d tree on categorical indicators   | QR, fitted per query on the neighbors |

use serde::{Deserialize, Serialize};

use crate::data::{encode, CategoricalEncoding, Dataset, EncodedMatrix, FeatureSchema, Value};
use crate::error::{invalid, Error, Result};
use crate::linear::{fit_quantile_with, fit_ridge_with, LinearFitOptions, LinearPredictor, LinearQuantileModel, RidgeModel};
use crate::partition::{build_cart, fit_kmeans, ClusterPartition, NeighborhoodIndex, RegressionTree, TreeParams, KMEANS_MAX_ITER};

pub const DEFAULT_QUANTILES: [f64; 3] = [0.05, 0.5, 0.95];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositeKind {
    QuantileTree,
    PiecewiseQr,
    PiecewiseRr,
    NnQr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeParams {
    pub lambda: f64,
    pub tree: TreeParams,
    pub n_clusters: usize,
    pub n_neighbors: usize,
    pub quantiles: Vec<f64>,
    pub seed: u64,
    pub standardize: bool,
}

impl Default for CompositeParams {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            tree: TreeParams::default(),
            n_clusters: 4,
            n_neighbors: 50,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            seed: 0,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Partitioner {
    Tree(RegressionTree),
    Clusters(ClusterPartition),
    Neighborhood(NeighborhoodIndex),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Estimator {
    /// One model per quantile level, in the order of the model's levels.
    Quantile { models: Vec<LinearQuantileModel> },
    Ridge { model: RidgeModel },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionModel {
    pub rows: usize,
    /// Intercept-only estimator used because the partition was too small.
    pub fallback: bool,
    pub estimator: Estimator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainingSet {
    x: EncodedMatrix,
    y: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

impl PredictionInterval {
    /// Sorts the three raw quantile predictions, repairing any crossing.
    pub fn rearranged(lower: f64, median: f64, upper: f64) -> Self {
        let mut v = [lower, median, upper];
        v.sort_by(f64::total_cmp);
        Self { lower: v[0], median: v[1], upper: v[2] }
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeQuantileModel {
    kind: CompositeKind,
    params: CompositeParams,
    quantiles: Vec<f64>,
    schema: FeatureSchema,
    encoding: CategoricalEncoding,
    categorical_columns: Vec<usize>,
    partitioner: Partitioner,
    partitions: Vec<PartitionModel>,
    training: Option<TrainingSet>,
}

fn find_level(levels: &[f64], alpha: f64) -> Option<usize> {
    levels.iter().position(|a| (a - alpha).abs() < 1e-12)
}

fn validate(kind: CompositeKind, params: &CompositeParams) -> Result<Vec<f64>> {
    if !(params.lambda >= 0.0 && params.lambda.is_finite()) {
        return Err(invalid(format!("penalty must be nonnegative, got {}", params.lambda)));
    }
    if kind == CompositeKind::PiecewiseRr {
        return Ok(vec![0.5]);
    }
    if params.quantiles.is_empty() {
        return Err(invalid("at least one quantile level is required"));
    }
    for &a in &params.quantiles {
        if !(a > 0.0 && a < 1.0) {
            return Err(invalid(format!("quantile level {a} outside (0, 1)")));
        }
    }
    match kind {
        CompositeKind::QuantileTree if params.tree.min_samples_split == 0 || params.tree.min_samples_leaf == 0 => {
            Err(invalid("tree sample limits must be positive"))
        }
        CompositeKind::PiecewiseQr if params.n_clusters == 0 => Err(invalid("cluster count must be positive")),
        CompositeKind::NnQr if params.n_neighbors == 0 => Err(invalid("neighbor count must be positive")),
        _ => Ok(params.quantiles.clone()),
    }
}

impl CompositeQuantileModel {
    /// Encodes `dataset` (learning its one-hot levels) and fits the model.
    pub fn fit(kind: CompositeKind, dataset: &Dataset, params: &CompositeParams) -> Result<Self> {
        let quantiles = validate(kind, params)?;
        let (x, y, encoding) = encode(dataset, None)?;
        let categorical_columns = x.categorical_columns();
        let opts = LinearFitOptions { standardize: params.standardize };
        let p = x.n_cols();
        let fit_partition = |rows: &[usize]| -> Result<PartitionModel> {
            let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            if ys.is_empty() {
                // unreachable partitions fall back to global quantiles
                return Ok(fallback(kind, &y, &quantiles, p, 0));
            }
            if rows.len() < p + 2 {
                return Ok(fallback(kind, &ys, &quantiles, p, rows.len()));
            }
            let xs = x.select_rows(rows);
            let estimator = match kind {
                CompositeKind::PiecewiseRr => Estimator::Ridge { model: fit_ridge_with(&xs, &ys, params.lambda, opts)? },
                _ => Estimator::Quantile {
                    models: quantiles
                        .iter()
                        .map(|&a| fit_quantile_with(&xs, &ys, a, params.lambda, opts))
                        .collect::<Result<_>>()?,
                },
            };
            Ok(PartitionModel { rows: rows.len(), fallback: false, estimator })
        };

        let (partitioner, partitions, training) = match kind {
            CompositeKind::QuantileTree => {
                let tree = build_cart(&x, &y, params.tree)?;
                let partitions = (0..tree.n_leaves()).map(|l| fit_partition(tree.leaf(l).0)).collect::<Result<Vec<_>>>()?;
                (Partitioner::Tree(tree), partitions, None)
            }
            CompositeKind::PiecewiseQr | CompositeKind::PiecewiseRr => {
                let xc = x.select_columns(&categorical_columns);
                let clusters = fit_kmeans(&xc, params.n_clusters, params.seed, KMEANS_MAX_ITER)?;
                let mut members = vec![Vec::new(); clusters.k()];
                for (i, r) in xc.rows().enumerate() {
                    members[clusters.assign(r)?].push(i);
                }
                let partitions = members.iter().map(|m| fit_partition(m)).collect::<Result<Vec<_>>>()?;
                (Partitioner::Clusters(clusters), partitions, None)
            }
            CompositeKind::NnQr => {
                if params.n_neighbors > x.n_rows() {
                    return Err(invalid(format!("neighbor count {} exceeds {} training rows", params.n_neighbors, x.n_rows())));
                }
                let xc = x.select_columns(&categorical_columns);
                let index = NeighborhoodIndex::build(&xc, params.n_neighbors)?;
                (Partitioner::Neighborhood(index), Vec::new(), Some(TrainingSet { x, y }))
            }
        };
        Ok(Self {
            kind,
            params: params.clone(),
            quantiles,
            schema: dataset.schema().clone(),
            encoding,
            categorical_columns,
            partitioner,
            partitions,
            training,
        })
    }

    pub fn kind(&self) -> CompositeKind {
        self.kind
    }

    pub fn params(&self) -> &CompositeParams {
        &self.params
    }

    pub fn quantiles(&self) -> &[f64] {
        &self.quantiles
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn encoding(&self) -> &CategoricalEncoding {
        &self.encoding
    }

    pub fn partitioner(&self) -> &Partitioner {
        &self.partitioner
    }

    /// Per-partition estimators; empty for `nn_qr`.
    pub fn partitions(&self) -> &[PartitionModel] {
        &self.partitions
    }

    pub fn n_features(&self) -> usize {
        self.encoding.width()
    }

    fn categorical_part(&self, x: &[f64]) -> Vec<f64> {
        self.categorical_columns.iter().map(|&j| x[j]).collect()
    }

    fn check_width(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features() {
            return Err(Error::DimensionMismatch { expected: self.n_features(), got: x.len() });
        }
        Ok(())
    }

    /// Partition containing an encoded row (tree and cluster kinds).
    pub fn partition_of(&self, x: &[f64]) -> Result<usize> {
        self.check_width(x)?;
        match &self.partitioner {
            Partitioner::Tree(t) => t.route(x),
            Partitioner::Clusters(c) => c.assign(&self.categorical_part(x)),
            Partitioner::Neighborhood(_) => Err(invalid("nearest-neighbor partitions are per query")),
        }
    }

    /// Membership indicator of an encoded row for every partition.
    pub fn indicators(&self, x: &[f64]) -> Result<Vec<bool>> {
        let hit = self.partition_of(x)?;
        Ok((0..self.partitions.len()).map(|i| i == hit).collect())
    }

    /// Output of partition `i`'s estimator at level `alpha`, wherever `x` lies.
    pub fn partition_prediction(&self, i: usize, x: &[f64], alpha: f64) -> Result<f64> {
        self.check_width(x)?;
        let part = self.partitions.get(i).ok_or_else(|| invalid(format!("no partition {i}")))?;
        match &part.estimator {
            Estimator::Ridge { model } => {
                if find_level(&self.quantiles, alpha).is_none() {
                    return Err(invalid(format!("ridge partitions only answer level 0.5, asked {alpha}")));
                }
                model.predict(x)
            }
            Estimator::Quantile { models } => {
                let l = find_level(&self.quantiles, alpha).ok_or_else(|| invalid(format!("model was not fitted at level {alpha}")))?;
                models[l].predict(x)
            }
        }
    }

    /// `alpha`-quantile prediction for an encoded row.
    pub fn predict_encoded(&self, x: &[f64], alpha: f64) -> Result<f64> {
        self.check_width(x)?;
        match &self.partitioner {
            Partitioner::Neighborhood(index) => self.predict_neighborhood(index, x, alpha),
            _ => {
                let i = self.partition_of(x)?;
                self.partition_prediction(i, x, alpha)
            }
        }
    }

    fn predict_neighborhood(&self, index: &NeighborhoodIndex, x: &[f64], alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid(format!("quantile level {alpha} outside (0, 1)")));
        }
        let train = self.training.as_ref().expect("nn_qr keeps its training set");
        let neighbors = index.query(&self.categorical_part(x), index.k())?;
        let rows: Vec<usize> = neighbors.iter().map(|(i, _)| *i).collect();
        let ys: Vec<f64> = rows.iter().map(|&i| train.y[i]).collect();
        let p = self.n_features();
        if rows.len() < p + 2 {
            return Ok(LinearQuantileModel::intercept_only(&ys, alpha, p).intercept());
        }
        let opts = LinearFitOptions { standardize: self.params.standardize };
        let model = fit_quantile_with(&train.x.select_rows(&rows), &ys, alpha, self.params.lambda, opts)?;
        model.predict(x)
    }

    pub fn predict_interval_encoded(&self, x: &[f64]) -> Result<PredictionInterval> {
        if self.kind == CompositeKind::PiecewiseRr {
            return Err(invalid("piecewise ridge models give point predictions only"));
        }
        let (lo, hi) = outer_levels(&self.quantiles)?;
        let q = |a: f64| self.predict_encoded(x, a);
        Ok(PredictionInterval::rearranged(q(lo)?, q(0.5)?, q(hi)?))
    }

    pub fn encode_row(&self, schema: &FeatureSchema, row: &[Value]) -> Result<Vec<f64>> {
        self.encoding.encode_row(schema, row)
    }

    /// `alpha`-quantile prediction for a raw row laid out by `schema`.
    pub fn predict_quantile(&self, schema: &FeatureSchema, row: &[Value], alpha: f64) -> Result<f64> {
        self.predict_encoded(&self.encode_row(schema, row)?, alpha)
    }

    pub fn predict_interval(&self, schema: &FeatureSchema, row: &[Value]) -> Result<PredictionInterval> {
        self.predict_interval_encoded(&self.encode_row(schema, row)?)
    }

    /// Parameter count: two per internal tree node plus, per partition and
    /// per level, one per coefficient and one intercept (intercept only
    /// for fallback partitions). `None` for `nn_qr`.
    pub fn count_parameters(&self) -> Option<usize> {
        let linear: usize = self
            .partitions
            .iter()
            .map(|part| {
                let per_model = if part.fallback { 1 } else { self.n_features() + 1 };
                let models = match &part.estimator {
                    Estimator::Quantile { models } => models.len(),
                    Estimator::Ridge { .. } => 1,
                };
                per_model * models
            })
            .sum();
        match &self.partitioner {
            Partitioner::Tree(t) => Some(2 * t.n_internal() + linear),
            Partitioner::Clusters(_) => Some(linear),
            Partitioner::Neighborhood(_) => None,
        }
    }
}

/// Lowest and highest level of a set that also contains the median.
pub fn outer_levels(levels: &[f64]) -> Result<(f64, f64)> {
    if find_level(levels, 0.5).is_none() {
        return Err(invalid("interval prediction needs the 0.5 level"));
    }
    let lo = levels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = levels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

fn fallback(kind: CompositeKind, y: &[f64], quantiles: &[f64], p: usize, rows: usize) -> PartitionModel {
    let estimator = match kind {
        CompositeKind::PiecewiseRr => Estimator::Ridge { model: RidgeModel::intercept_only(y, p) },
        _ => Estimator::Quantile { models: quantiles.iter().map(|&a| LinearQuantileModel::intercept_only(y, a, p)).collect() },
    };
    PartitionModel { rows, fallback: true, estimator }
}
