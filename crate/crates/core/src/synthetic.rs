//! Synthetic cascading-delay projects with known conditional quantiles.
//!
//! Per project a site type `c` is drawn, then intermediate durations
//! `d_j = b_j + sum_{k<j} w_jk d_k + e_j` and the target
//! `beta0 + sum_j gamma_j d_j + effects + e + B * E`, with `e, e_j ~ N(0, sigma_c)`,
//! `B ~ Bernoulli(rho)` and `E ~ Exponential(mean tau)`. Given the features the
//! target is `mu + noise`, where the noise law only depends on `c`, so every
//! conditional quantile is `mu + offset_c(alpha)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::data::{Column, ColumnKind, Dataset, FeatureSchema, Value};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub name: String,
    pub probability: f64,
    /// Additive shift of the target.
    pub effect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteLevel {
    pub name: String,
    pub probability: f64,
    pub effect: f64,
    /// Standard deviation of every Gaussian noise term for this site type.
    pub noise: f64,
    /// Overrides `noise` for the intermediate durations only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_noise: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub levels: Vec<Level>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_projects: usize,
    pub seed: u64,
    pub site_column: String,
    pub site_levels: Vec<SiteLevel>,
    pub attributes: Vec<Attribute>,
    /// Baseline `b_j` per intermediate milestone.
    pub baselines: Vec<f64>,
    /// Lower-triangular cascade weights; row `j` holds `w_jk` for `k < j`.
    pub cascade: Vec<Vec<f64>>,
    /// Target coefficient `gamma_j` per intermediate duration.
    pub gamma: Vec<f64>,
    pub intercept: f64,
    /// Probability of a long-tail delay.
    pub rho: f64,
    /// Mean of the exponential long-tail delay.
    pub tau: f64,
    pub target: String,
}

fn default_target() -> String {
    "target_days".to_string()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let lv = |name: &str, probability, effect| Level { name: name.into(), probability, effect };
        Self {
            n_projects: 2000,
            seed: 7,
            site_column: "site_type".into(),
            site_levels: vec![
                SiteLevel { name: "urban".into(), probability: 0.5, effect: 0.0, noise: 1.0, duration_noise: None },
                SiteLevel { name: "suburban".into(), probability: 0.3, effect: 3.0, noise: 3.0, duration_noise: None },
                SiteLevel { name: "rural".into(), probability: 0.2, effect: 8.0, noise: 6.0, duration_noise: None },
            ],
            attributes: vec![
                Attribute {
                    name: "region".into(),
                    levels: vec![lv("east", 0.25, -1.0), lv("north", 0.25, 0.0), lv("south", 0.25, 2.0), lv("west", 0.25, 4.0)],
                },
                Attribute { name: "technology".into(), levels: vec![lv("4g", 0.6, 0.0), lv("5g", 0.4, 5.0)] },
            ],
            baselines: vec![10.0, 15.0, 8.0],
            cascade: vec![vec![], vec![0.5], vec![0.2, 0.4]],
            gamma: vec![1.0, 0.8, 1.2],
            intercept: 5.0,
            rho: 0.05,
            tau: 30.0,
            target: default_target(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let m = self.baselines.len();
        if self.n_projects == 0 {
            return Err(invalid("synthetic spec needs at least one project"));
        }
        if m == 0 || self.gamma.len() != m || self.cascade.len() != m {
            return Err(invalid("baselines, cascade and gamma must have one entry per intermediate milestone"));
        }
        for (j, row) in self.cascade.iter().enumerate() {
            if row.len() != j {
                return Err(invalid(format!("cascade row {j} must have {j} weights")));
            }
            if row.iter().any(|w| !(*w >= 0.0)) {
                return Err(invalid("cascade weights must be nonnegative"));
            }
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(invalid(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if self.rho > 0.0 && !(self.tau > 0.0) {
            return Err(invalid("tail scale must be positive when rho > 0"));
        }
        check_probabilities(self.site_levels.iter().map(|l| l.probability), &self.site_column)?;
        if self.site_levels.iter().any(|l| !(l.noise >= 0.0) || l.duration_noise.is_some_and(|s| !(s >= 0.0))) {
            return Err(invalid("noise scales must be nonnegative"));
        }
        for a in &self.attributes {
            check_probabilities(a.levels.iter().map(|l| l.probability), &a.name)?;
        }
        let mut names: Vec<&str> = vec![self.site_column.as_str(), self.target.as_str(), "project_id"];
        names.extend(self.attributes.iter().map(|a| a.name.as_str()));
        let durations = self.duration_columns();
        names.extend(durations.iter().map(String::as_str));
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        if names.len() != n {
            return Err(invalid("synthetic column names collide"));
        }
        Ok(())
    }

    pub fn duration_columns(&self) -> Vec<String> {
        (1..=self.baselines.len()).map(|j| format!("m{j}_days")).collect()
    }

    pub fn schema(&self) -> Result<FeatureSchema> {
        let mut cols = vec![Column::new("project_id", ColumnKind::Identifier), Column::new(&self.site_column, ColumnKind::Categorical)];
        cols.extend(self.attributes.iter().map(|a| Column::new(&a.name, ColumnKind::Categorical)));
        cols.extend(self.duration_columns().into_iter().map(|c| Column::new(c, ColumnKind::Numeric)));
        cols.push(Column::new(&self.target, ColumnKind::Numeric));
        FeatureSchema::new(cols, &self.target, "days")
    }

    /// Noise quantile for a site level: `q` with `P(e + B * E <= q) = alpha`.
    pub fn noise_quantile(&self, sigma: f64, alpha: f64) -> f64 {
        mixture_quantile(sigma, self.rho, self.tau, alpha)
    }

    /// Everything needed to recompute the true quantiles from file rows.
    pub fn truth(&self, quantiles: &[f64]) -> GroundTruth {
        let mut effects = BTreeMap::new();
        effects.insert(
            self.site_column.clone(),
            self.site_levels.iter().map(|l| (l.name.clone(), l.effect)).collect::<BTreeMap<_, _>>(),
        );
        for a in &self.attributes {
            effects.insert(a.name.clone(), a.levels.iter().map(|l| (l.name.clone(), l.effect)).collect());
        }
        let offsets = self
            .site_levels
            .iter()
            .map(|l| (l.name.clone(), quantiles.iter().map(|&a| self.noise_quantile(l.noise, a)).collect()))
            .collect();
        GroundTruth {
            intercept: self.intercept,
            coefficients: self.duration_columns().into_iter().zip(self.gamma.iter().copied()).collect(),
            effects,
            site_column: self.site_column.clone(),
            quantiles: quantiles.to_vec(),
            noise_offsets: offsets,
            spec: self.clone(),
        }
    }
}

fn check_probabilities(probs: impl Iterator<Item = f64>, name: &str) -> Result<()> {
    let probs: Vec<f64> = probs.collect();
    if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("level probabilities of {name} must be nonnegative and sum to 1")));
    }
    Ok(())
}

fn draw_level(rng: &mut ChaCha8Rng, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("validated scale").sample(rng)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let schema = spec.schema()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tail = if spec.rho > 0.0 { Some(Exp::new(1.0 / spec.tau).map_err(|e| invalid(e.to_string()))?) } else { None };
    let width = spec.baselines.len();
    let id_width = spec.n_projects.to_string().len();
    let mut rows = Vec::with_capacity(spec.n_projects);
    for p in 0..spec.n_projects {
        let site = &spec.site_levels[draw_level(&mut rng, spec.site_levels.iter().map(|l| l.probability))];
        let mut row = vec![Value::Text(format!("P{:0id_width$}", p + 1)), Value::Text(site.name.clone())];
        let mut mu = spec.intercept + site.effect;
        for a in &spec.attributes {
            let level = &a.levels[draw_level(&mut rng, a.levels.iter().map(|l| l.probability))];
            mu += level.effect;
            row.push(Value::Text(level.name.clone()));
        }
        let mut d = Vec::with_capacity(width);
        for j in 0..width {
            let cascade: f64 = spec.cascade[j].iter().zip(&d).map(|(w, dk)| w * dk).sum();
            d.push(spec.baselines[j] + cascade + gaussian(&mut rng, site.duration_noise.unwrap_or(site.noise)));
        }
        mu += spec.gamma.iter().zip(&d).map(|(g, dj)| g * dj).sum::<f64>();
        let mut y = mu + gaussian(&mut rng, site.noise);
        // draw both so the stream layout does not depend on the outcome
        let hit = rng.random::<f64>() < spec.rho;
        if let Some(tail) = &tail {
            let delay = tail.sample(&mut rng);
            if hit {
                y += delay;
            }
        }
        row.extend(d.into_iter().map(Value::Number));
        row.push(Value::Number(y));
        rows.push(row);
    }
    Dataset::new(schema, rows)
}

/// Generator parameters plus the closed-form pieces of the true quantiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub intercept: f64,
    pub coefficients: BTreeMap<String, f64>,
    pub effects: BTreeMap<String, BTreeMap<String, f64>>,
    pub site_column: String,
    pub quantiles: Vec<f64>,
    /// Per site level, the noise quantile at each entry of `quantiles`.
    pub noise_offsets: BTreeMap<String, Vec<f64>>,
    pub spec: SyntheticSpec,
}

impl GroundTruth {
    /// Conditional mean of the Gaussian part, `mu`, for a row of `schema`.
    pub fn linear_part(&self, schema: &FeatureSchema, row: &[Value]) -> Result<f64> {
        let mut mu = self.intercept;
        for (name, g) in &self.coefficients {
            let j = schema.index_of(name).ok_or_else(|| invalid(format!("row lacks column {name}")))?;
            mu += g * row[j].as_f64().ok_or_else(|| invalid(format!("{name} is not numeric")))?;
        }
        for (name, levels) in &self.effects {
            let j = schema.index_of(name).ok_or_else(|| invalid(format!("row lacks column {name}")))?;
            let level = row[j].as_text().ok_or_else(|| invalid(format!("{name} is not categorical")))?;
            mu += levels.get(level).ok_or_else(|| invalid(format!("unknown level {level} of {name}")))?;
        }
        Ok(mu)
    }

    pub fn quantile(&self, schema: &FeatureSchema, row: &[Value], alpha: f64) -> Result<f64> {
        let mu = self.linear_part(schema, row)?;
        let j = schema.index_of(&self.site_column).ok_or_else(|| invalid("row lacks the site column"))?;
        let level = row[j].as_text().unwrap_or_default();
        let site = self
            .spec
            .site_levels
            .iter()
            .find(|l| l.name == level)
            .ok_or_else(|| invalid(format!("unknown site level {level}")))?;
        let offset = match self.quantiles.iter().position(|a| (a - alpha).abs() < 1e-12) {
            Some(i) => self.noise_offsets[level][i],
            None => self.spec.noise_quantile(site.noise, alpha),
        };
        Ok(mu + offset)
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    NormalDist::new(0.0, 1.0).expect("unit normal").cdf(z)
}

/// CDF of `N(0, sigma) + B * Exp(mean tau)` with `P(B = 1) = rho`.
pub fn mixture_cdf(sigma: f64, rho: f64, tau: f64, t: f64) -> f64 {
    let gauss = if sigma == 0.0 { if t >= 0.0 { 1.0 } else { 0.0 } } else { std_normal_cdf(t / sigma) };
    if rho == 0.0 {
        return gauss;
    }
    let lam = 1.0 / tau;
    let exgauss = if sigma == 0.0 {
        if t >= 0.0 { 1.0 - (-lam * t).exp() } else { 0.0 }
    } else {
        // Phi(t/s) - exp(-lam t + lam^2 s^2 / 2) Phi(t/s - lam s), tail term in logs
        let b = std_normal_cdf(t / sigma - lam * sigma);
        let tail = if b > 0.0 { (-lam * t + 0.5 * (lam * sigma).powi(2) + b.ln()).exp() } else { 0.0 };
        (gauss - tail).max(0.0)
    };
    (1.0 - rho) * gauss + rho * exgauss
}

/// Inverse of [`mixture_cdf`] by bisection.
pub fn mixture_quantile(sigma: f64, rho: f64, tau: f64, alpha: f64) -> f64 {
    let tail = if rho > 0.0 { tau } else { 0.0 };
    let mut lo = -12.0 * sigma - 1.0;
    let mut hi = 12.0 * sigma + 60.0 * tail + 1.0;
    while mixture_cdf(sigma, rho, tau, hi) < alpha {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mixture_cdf(sigma, rho, tau, mid) >= alpha {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-12 * (1.0 + hi.abs()) {
            break;
        }
    }
    hi
}

/// Two site regimes with opposite slopes: `y = x + e` for `A`, `y = 10 - x + e`
/// for `B`, x uniform on [0, 20], plus a linear nuisance duration `z` shared by
/// both regimes. `noise` holds the standard deviation of `e` per regime.
pub fn generate_two_regime(n: usize, noise: [f64; 2], seed: u64) -> Result<Dataset> {
    if n == 0 || noise.iter().any(|s| !(*s >= 0.0)) {
        return Err(invalid("two-regime data needs rows and nonnegative noise"));
    }
    let schema = FeatureSchema::new(
        vec![
            Column::new("regime", ColumnKind::Categorical),
            Column::new("x", ColumnKind::Numeric),
            Column::new("z", ColumnKind::Numeric),
            Column::new("y", ColumnKind::Numeric),
        ],
        "y",
        "days",
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            let b = rng.random::<bool>();
            let x: f64 = rng.random_range(0.0..20.0);
            let z: f64 = rng.random_range(0.0..5.0);
            let base = if b { 10.0 - x } else { x };
            let y = base + 0.5 * z + gaussian(&mut rng, noise[b as usize]);
            vec![Value::from(if b { "B" } else { "A" }), x.into(), z.into(), y.into()]
        })
        .collect();
    Dataset::new(schema, rows)
}
