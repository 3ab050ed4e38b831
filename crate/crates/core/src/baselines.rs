//! Benchmark comparators: mean-leaf decision tree, bootstrap random forest,
//! quantile regression forest and squared-loss gradient boosting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EncodedMatrix;
use crate::error::{invalid, Error, Result};
use crate::partition::{build_cart, build_cart_on, FeatureSampler, RegressionTree, TreeParams};

/// A single CART tree predicting leaf means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTreeModel {
    tree: RegressionTree,
}

impl DecisionTreeModel {
    pub fn tree(&self) -> &RegressionTree {
        &self.tree
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.tree.predict_mean(x)
    }

    pub fn param_count(&self) -> usize {
        2 * self.tree.n_internal()
    }
}

pub fn fit_dt_mean(x: &EncodedMatrix, y: &[f64], params: TreeParams) -> Result<DecisionTreeModel> {
    Ok(DecisionTreeModel { tree: build_cart(x, y, params)? })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub tree: TreeParams,
    pub bootstrap: bool,
    /// Share of features considered at each split.
    pub feature_fraction: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 100, tree: TreeParams::default(), bootstrap: true, feature_fraction: 1.0, seed: 0 }
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of tree `index` under `master`; independent of training order.
pub fn tree_seed(master: u64, index: usize) -> u64 {
    mix64(master ^ mix64(index as u64))
}

/// Bootstrap forest. Leaves keep the (possibly repeated) training row
/// indices they were grown on, which the quantile forest reuses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    trees: Vec<RegressionTree>,
    seeds: Vec<u64>,
    bootstrap: bool,
    feature_fraction: f64,
    train_y: Vec<f64>,
}

pub fn fit_rf(x: &EncodedMatrix, y: &[f64], params: ForestParams) -> Result<ForestModel> {
    if params.n_trees == 0 {
        return Err(invalid("a forest needs at least one tree"));
    }
    if !(params.feature_fraction > 0.0 && params.feature_fraction <= 1.0) {
        return Err(invalid(format!("feature fraction must lie in (0, 1], got {}", params.feature_fraction)));
    }
    let n = x.n_rows();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let p = x.n_cols();
    let max_features = ((params.feature_fraction * p as f64).ceil() as usize).clamp(1, p.max(1));
    let seeds: Vec<u64> = (0..params.n_trees).map(|t| tree_seed(params.seed, t)).collect();
    let trees = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<usize> =
                if params.bootstrap { (0..n).map(|_| rng.random_range(0..n)).collect() } else { (0..n).collect() };
            let sampler = (max_features < p).then_some(FeatureSampler { max_features, rng: &mut rng });
            build_cart_on(x, y, &rows, params.tree, sampler)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForestModel { trees, seeds, bootstrap: params.bootstrap, feature_fraction: params.feature_fraction, train_y: y.to_vec() })
}

impl ForestModel {
    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn bootstrap(&self) -> bool {
        self.bootstrap
    }

    pub fn feature_fraction(&self) -> f64 {
        self.feature_fraction
    }

    pub fn train_targets(&self) -> &[f64] {
        &self.train_y
    }

    /// Mean of the member trees' leaf means.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let mut sum = 0.0;
        for t in &self.trees {
            sum += t.predict_mean(x)?;
        }
        Ok(sum / self.trees.len() as f64)
    }

    pub fn param_count(&self) -> usize {
        self.trees.iter().map(|t| 2 * t.n_internal()).sum()
    }

    /// Quantile-forest weights over training rows:
    /// `w_i = mean over trees of (occurrences of i in the leaf) / (leaf size)`.
    pub fn qrf_weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut w = vec![0.0; self.train_y.len()];
        let per_tree = 1.0 / self.trees.len() as f64;
        for t in &self.trees {
            let (rows, _) = t.leaf(t.route(x)?);
            let share = per_tree / rows.len() as f64;
            for &i in rows {
                w[i] += share;
            }
        }
        Ok(w)
    }

    /// Weighted empirical `alpha`-quantile of the training targets: the
    /// smallest target whose cumulative weight reaches `alpha`.
    pub fn qrf_predict(&self, x: &[f64], alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid(format!("quantile level must lie in (0, 1), got {alpha}")));
        }
        let w = self.qrf_weights(x)?;
        let mut order: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
        order.sort_by(|&a, &b| self.train_y[a].total_cmp(&self.train_y[b]).then(a.cmp(&b)));
        Ok(weighted_quantile(&order, &w, &self.train_y, alpha))
    }
}

pub(crate) const CUMULATIVE_TOL: f64 = 1e-12;

fn weighted_quantile(order: &[usize], w: &[f64], y: &[f64], alpha: f64) -> f64 {
    let mut acc = 0.0;
    for &i in order {
        acc += w[i];
        if acc >= alpha - CUMULATIVE_TOL {
            return y[i];
        }
    }
    y[*order.last().expect("weights are never all zero")]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostingParams {
    pub n_stages: usize,
    pub learning_rate: f64,
    pub tree: TreeParams,
}

/// Stagewise squared-loss boosting: `F_m = F_{m-1} + learning_rate * tree_m`
/// with each tree fitted to the current residuals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    init: f64,
    learning_rate: f64,
    stages: Vec<RegressionTree>,
}

impl BoostedModel {
    pub fn init(&self) -> f64 {
        self.init
    }

    pub fn stages(&self) -> &[RegressionTree] {
        &self.stages
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let mut f = self.init;
        for t in &self.stages {
            f += self.learning_rate * t.predict_mean(x)?;
        }
        Ok(f)
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(|t| 2 * t.n_internal()).sum()
    }
}

pub fn fit_gb(x: &EncodedMatrix, y: &[f64], params: BoostingParams) -> Result<BoostedModel> {
    fit_gb_traced(x, y, params).map(|(m, _)| m)
}

/// Like [`fit_gb`], also returning the training SSE after each stage
/// (index 0 is the constant model).
pub fn fit_gb_traced(x: &EncodedMatrix, y: &[f64], params: BoostingParams) -> Result<(BoostedModel, Vec<f64>)> {
    if params.n_stages == 0 {
        return Err(invalid("boosting needs at least one stage"));
    }
    if !(params.learning_rate > 0.0 && params.learning_rate <= 1.0) {
        return Err(invalid(format!("learning rate must lie in (0, 1], got {}", params.learning_rate)));
    }
    let n = x.n_rows();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let init = y.iter().sum::<f64>() / n as f64;
    let mut fitted = vec![init; n];
    let sse = |f: &[f64]| -> f64 { y.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum() };
    let mut history = vec![sse(&fitted)];
    let mut stages = Vec::with_capacity(params.n_stages);
    for _ in 0..params.n_stages {
        let residual: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let tree = build_cart(x, &residual, params.tree)?;
        for (i, f) in fitted.iter_mut().enumerate() {
            *f += params.learning_rate * tree.leaf(tree.route_unchecked(x.row(i))).1;
        }
        history.push(sse(&fitted));
        stages.push(tree);
    }
    Ok((BoostedModel { init, learning_rate: params.learning_rate, stages }, history))
}
