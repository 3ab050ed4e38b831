//! Milestone-record wrangling, feature engineering, feature selection, lag
//! construction for VM traces, and fold-local imputation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::{Column, ColumnKind, Dataset, FeatureSchema, Value};
use crate::error::{invalid, Error, Result};
use crate::linear::empirical_quantile;

pub const UNKNOWN_CLIMATE: &str = "unknown";
pub const MISSING_LEVEL: &str = "missing";

/// One row of the milestone CSV: a single milestone of one project.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MilestoneRecord {
    pub project_id: String,
    #[serde(default)]
    pub site_id: String,
    pub milestone: String,
    #[serde(default)]
    pub phase: String,
    #[serde(default)]
    pub planned_date: Option<String>,
    #[serde(default)]
    pub actual_date: Option<String>,
    #[serde(default)]
    pub city: Option<String>,
    #[serde(default)]
    pub state: Option<String>,
    #[serde(default)]
    pub region: Option<String>,
    #[serde(default)]
    pub market: Option<String>,
    #[serde(default)]
    pub latitude: Option<f64>,
    #[serde(default)]
    pub longitude: Option<f64>,
    #[serde(default)]
    pub zip: Option<String>,
    #[serde(default)]
    pub nature: Option<String>,
    #[serde(default)]
    pub technology: Option<String>,
}

impl MilestoneRecord {
    /// Completion date, `None` for an incomplete milestone.
    pub fn completed(&self) -> Result<Option<NaiveDate>> {
        match self.actual_date.as_deref().map(str::trim) {
            None | Some("") => Ok(None),
            Some(s) => parse_date(s).map(Some),
        }
    }
}

pub fn read_milestones<R: Read>(reader: R, delimiter: u8) -> Result<Vec<MilestoneRecord>> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).trim(csv::Trim::All).from_reader(reader);
    let records = rdr.deserialize().collect::<std::result::Result<Vec<MilestoneRecord>, _>>()?;
    for r in &records {
        if let Some(s) = r.planned_date.as_deref().filter(|s| !s.trim().is_empty()) {
            parse_date(s)?;
        }
        r.completed()?;
    }
    Ok(records)
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    let s = s.trim();
    ["%Y-%m-%d", "%Y/%m/%d", "%m/%d/%Y"]
        .iter()
        .find_map(|f| NaiveDate::parse_from_str(s, f).ok())
        .ok_or_else(|| Error::Parse(format!("unparseable date `{s}`")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DateFeatures {
    pub month: u32,
    pub quarter: u32,
    pub year: i32,
}

pub fn derive_date_features(date: &str) -> Result<DateFeatures> {
    Ok(date_features(parse_date(date)?))
}

pub fn date_features(d: NaiveDate) -> DateFeatures {
    DateFeatures { month: d.month(), quarter: d.month().div_ceil(3), year: d.year() }
}

/// First two characters of a zip or postal code.
pub fn zip_region(zip: &str) -> Result<String> {
    let zip = zip.trim();
    if zip.is_empty() {
        return Err(invalid("empty zip code"));
    }
    Ok(zip.chars().take(2).collect())
}

/// User-supplied map from state or region to a climate class.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClimateTable {
    classes: BTreeMap<String, String>,
}

impl ClimateTable {
    /// Reads a two-column CSV (`region,climate`) with a header row.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.len() != 2 {
            return Err(Error::Parse(format!("climate table needs 2 columns, header has {}", header.len())));
        }
        let mut classes = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 2 || rec[0].is_empty() || rec[1].is_empty() {
                return Err(Error::Parse(format!("climate table line {}: expected `region,climate`", i + 2)));
            }
            if classes.insert(rec[0].to_string(), rec[1].to_string()).is_some() {
                return Err(Error::Parse(format!("climate table lists `{}` twice", &rec[0])));
            }
        }
        Ok(Self { classes })
    }

    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Self {
        Self { classes: pairs.into_iter().collect() }
    }

    pub fn lookup(&self, key: &str) -> &str {
        self.classes.get(key).map_or(UNKNOWN_CLIMATE, String::as_str)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Climate class of a site, looked up by state first, then by region.
pub fn attach_climate(state: Option<&str>, region: Option<&str>, table: &ClimateTable) -> String {
    [state, region]
        .into_iter()
        .flatten()
        .map(|k| table.lookup(k))
        .find(|c| *c != UNKNOWN_CLIMATE)
        .unwrap_or(UNKNOWN_CLIMATE)
        .to_string()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub projects: usize,
    pub kept: usize,
    /// Some listed milestone has no completion date.
    pub missing_milestone: usize,
    /// An intermediate milestone completed after the target.
    pub ordering_violation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectDurations {
    pub project_id: String,
    pub source_date: NaiveDate,
    /// Days from source to each intermediate milestone, in the listed order.
    pub intermediates: Vec<f64>,
    pub target: f64,
}

fn group_by_project(records: &[MilestoneRecord]) -> BTreeMap<&str, Vec<&MilestoneRecord>> {
    let mut projects: BTreeMap<&str, Vec<&MilestoneRecord>> = BTreeMap::new();
    for r in records {
        projects.entry(r.project_id.as_str()).or_default().push(r);
    }
    projects
}

/// First completion date recorded for each milestone of a project.
fn completion_dates<'a>(records: &[&'a MilestoneRecord]) -> Result<BTreeMap<&'a str, NaiveDate>> {
    let mut dates = BTreeMap::new();
    for r in records {
        if let Some(d) = r.completed()? {
            dates.entry(r.milestone.as_str()).or_insert(d);
        }
    }
    Ok(dates)
}

fn days(from: NaiveDate, to: NaiveDate) -> f64 {
    (to - from).num_days() as f64
}

/// Durations from `source` to each intermediate and to `target`, per project.
pub fn intermediate_durations(
    records: &[MilestoneRecord],
    source: &str,
    intermediates: &[String],
    target: &str,
) -> Result<(Vec<ProjectDurations>, ExclusionReport)> {
    let projects = group_by_project(records);
    let mut report = ExclusionReport { projects: projects.len(), ..Default::default() };
    let mut out = Vec::new();
    for (id, recs) in projects {
        let dates = completion_dates(&recs)?;
        let lookup = |m: &str| dates.get(m).copied();
        let (Some(s), Some(t)) = (lookup(source), lookup(target)) else {
            report.missing_milestone += 1;
            continue;
        };
        let Some(mids) = intermediates.iter().map(|m| lookup(m)).collect::<Option<Vec<_>>>() else {
            report.missing_milestone += 1;
            continue;
        };
        if mids.iter().any(|d| *d > t) {
            report.ordering_violation += 1;
            continue;
        }
        out.push(ProjectDurations {
            project_id: id.to_string(),
            source_date: s,
            intermediates: mids.iter().map(|d| days(s, *d)).collect(),
            target: days(s, t),
        });
    }
    report.kept = out.len();
    Ok((out, report))
}

/// Settings for turning milestone records into a modelling table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MilestoneConfig {
    pub source: String,
    pub intermediates: Vec<String>,
    pub target: String,
}

pub const TARGET_COLUMN: &str = "target_days";

pub fn duration_column(milestone: &str) -> String {
    let slug: String = milestone.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    format!("{slug}_days")
}

/// One row per usable project: site attributes, source-date calendar
/// features, intermediate durations and the target duration.
pub fn build_milestone_dataset(
    records: &[MilestoneRecord],
    config: &MilestoneConfig,
    climate: Option<&ClimateTable>,
) -> Result<(Dataset, ExclusionReport)> {
    let (durations, report) = intermediate_durations(records, &config.source, &config.intermediates, &config.target)?;
    let first: BTreeMap<&str, &MilestoneRecord> = records.iter().rev().map(|r| (r.project_id.as_str(), r)).collect();
    let cat = |name: &str| Column::new(name, ColumnKind::Categorical);
    let num = |name: &str| Column::new(name, ColumnKind::Numeric);
    let mut columns = vec![Column::new("project_id", ColumnKind::Identifier), Column::new("site_id", ColumnKind::Identifier)];
    columns.extend(["city", "state", "region", "market", "zip_region", "nature", "technology"].map(cat));
    if climate.is_some() {
        columns.push(cat("climate"));
    }
    columns.extend(["source_month", "source_quarter", "source_year"].map(cat));
    columns.extend(["latitude", "longitude"].map(num));
    let duration_names: Vec<String> = config.intermediates.iter().map(|m| duration_column(m)).collect();
    columns.extend(duration_names.iter().map(|n| num(n)));
    columns.push(num(TARGET_COLUMN));
    let schema = FeatureSchema::new(columns, TARGET_COLUMN, "days")?;

    let text = |v: &Option<String>| v.as_deref().filter(|s| !s.is_empty()).map_or(Value::Missing, Value::from);
    let number = |v: Option<f64>| v.map_or(Value::Missing, Value::Number);
    let mut rows = Vec::with_capacity(durations.len());
    for d in durations {
        let r = first[d.project_id.as_str()];
        let mut row = vec![Value::Text(d.project_id.clone()), Value::Text(r.site_id.clone())];
        row.extend([&r.city, &r.state, &r.region, &r.market].map(text));
        row.push(match r.zip.as_deref() {
            Some(z) if !z.trim().is_empty() => Value::Text(zip_region(z)?),
            _ => Value::Missing,
        });
        row.extend([&r.nature, &r.technology].map(text));
        if let Some(table) = climate {
            row.push(Value::Text(attach_climate(r.state.as_deref(), r.region.as_deref(), table)));
        }
        let f = date_features(d.source_date);
        row.extend([f.month.to_string(), f.quarter.to_string(), f.year.to_string()].map(Value::Text));
        row.extend([number(r.latitude), number(r.longitude)]);
        row.extend(d.intermediates.into_iter().map(Value::Number));
        row.push(Value::Number(d.target));
        rows.push(row);
    }
    Ok((Dataset::new(schema, rows)?, report))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneReport {
    pub removed: usize,
    pub remaining: usize,
}

/// Removes rows whose `column` value exceeds `cap`. Values are never altered.
pub fn prune_tail(dataset: &Dataset, column: &str, cap: f64) -> Result<(Dataset, PruneReport)> {
    let mut caps = BTreeMap::new();
    caps.insert(column.to_string(), cap);
    prune_caps(dataset, &caps)
}

/// Applies several caps jointly: a row is dropped if any capped column
/// exceeds its cap. Missing values never trigger removal.
pub fn prune_caps(dataset: &Dataset, caps: &BTreeMap<String, f64>) -> Result<(Dataset, PruneReport)> {
    let mut idx = Vec::with_capacity(caps.len());
    for (name, &cap) in caps {
        if !(cap > 0.0) {
            return Err(invalid(format!("cap for {name} must be positive, got {cap}")));
        }
        let j = dataset.schema().index_of(name).ok_or_else(|| Error::MissingColumns(vec![name.clone()]))?;
        idx.push((j, cap));
    }
    let kept = dataset.filter_rows(|r| idx.iter().all(|&(j, cap)| r[j].as_f64().is_none_or(|v| v <= cap)));
    let report = PruneReport { removed: dataset.len() - kept.len(), remaining: kept.len() };
    if kept.is_empty() && !dataset.is_empty() {
        log::warn!("tail caps removed all {} rows", dataset.len());
    }
    Ok((kept, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedMilestone {
    pub name: String,
    pub mean_rank: f64,
    pub projects: usize,
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(values: &[NaiveDate]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by_key(|&i| values[i]);
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Typical milestone order per phase: milestones sorted by their mean rank of
/// completion date within each project.
pub fn rank_milestones(records: &[MilestoneRecord]) -> Result<BTreeMap<String, Vec<RankedMilestone>>> {
    let mut sums: BTreeMap<&str, BTreeMap<&str, (f64, usize)>> = BTreeMap::new();
    for recs in group_by_project(records).values() {
        let mut phases: BTreeMap<&str, Vec<&MilestoneRecord>> = BTreeMap::new();
        for r in recs {
            phases.entry(r.phase.as_str()).or_default().push(r);
        }
        for (phase, recs) in phases {
            let dates = completion_dates(&recs)?;
            let (names, values): (Vec<&str>, Vec<NaiveDate>) = dates.into_iter().unzip();
            let acc = sums.entry(phase).or_default();
            for (name, rank) in names.into_iter().zip(average_ranks(&values)) {
                let e = acc.entry(name).or_insert((0.0, 0));
                e.0 += rank;
                e.1 += 1;
            }
        }
    }
    sums.retain(|_, m| !m.is_empty());
    if sums.is_empty() {
        return Err(invalid("no dated milestones to rank"));
    }
    Ok(sums
        .into_iter()
        .map(|(phase, m)| {
            let mut list: Vec<RankedMilestone> = m
                .into_iter()
                .map(|(name, (s, c))| RankedMilestone { name: name.to_string(), mean_rank: s / c as f64, projects: c })
                .collect();
            list.sort_by(|a, b| a.mean_rank.total_cmp(&b.mean_rank).then_with(|| a.name.cmp(&b.name)));
            (phase.to_string(), list)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCell {
    pub mean: f64,
    pub median: f64,
    pub support: usize,
}

/// Aggregated day gaps between milestone pairs; `cell(i, j)` describes
/// `date(j) - date(i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapMatrix {
    names: Vec<String>,
    cells: Vec<Vec<Option<GapCell>>>,
}

impl GapMatrix {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cell(&self, i: usize, j: usize) -> Option<GapCell> {
        self.cells[i][j]
    }

    pub fn get(&self, from: &str, to: &str) -> Option<GapCell> {
        let i = self.names.iter().position(|n| n == from)?;
        let j = self.names.iter().position(|n| n == to)?;
        self.cell(i, j)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn gap_matrix(records: &[MilestoneRecord]) -> Result<GapMatrix> {
    let names: Vec<String> = records.iter().map(|r| r.milestone.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let m = names.len();
    let pos: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut gaps: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); m]; m];
    for recs in group_by_project(records).values() {
        let dates: Vec<(usize, NaiveDate)> = completion_dates(recs)?.into_iter().map(|(n, d)| (pos[n], d)).collect();
        for &(i, di) in &dates {
            for &(j, dj) in &dates {
                gaps[i][j].push(days(di, dj));
            }
        }
    }
    let cells = gaps
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|mut g| {
                    (!g.is_empty()).then(|| GapCell {
                        mean: g.iter().sum::<f64>() / g.len() as f64,
                        median: median(&mut g),
                        support: g.len(),
                    })
                })
                .collect()
        })
        .collect();
    Ok(GapMatrix { names, cells })
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub column: String,
    /// `|r|` for numeric columns, the chi-square p-value for categorical ones.
    pub score: Option<f64>,
    pub retained: bool,
}

fn complete_pairs<'a>(dataset: &'a Dataset, j: usize) -> impl Iterator<Item = (&'a Value, f64)> + 'a {
    let t = dataset.schema().target_index();
    dataset.rows().iter().filter_map(move |r| r[t].as_f64().map(|y| (&r[j], y)))
}

/// Scores numeric predictors by `|Pearson r|` against the target.
pub fn select_numeric(dataset: &Dataset, threshold: f64) -> Result<Vec<FeatureScore>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(invalid(format!("correlation threshold {threshold} outside [0, 1]")));
    }
    let schema = dataset.schema();
    Ok(schema
        .predictor_indices()
        .into_iter()
        .filter(|&j| schema.columns()[j].kind == ColumnKind::Numeric)
        .map(|j| {
            let (x, y): (Vec<f64>, Vec<f64>) = complete_pairs(dataset, j).filter_map(|(v, y)| v.as_f64().map(|x| (x, y))).unzip();
            let r = if x.len() < 2 { None } else { pearson(&x, &y).map(f64::abs) };
            FeatureScore { column: schema.columns()[j].name.clone(), score: r, retained: r.is_some_and(|r| r >= threshold) }
        })
        .collect())
}

/// Quartile bin (0..=3) of each value using type-7 sample quartiles.
pub fn quartile_bins(y: &[f64]) -> Vec<usize> {
    let mut sorted = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let cuts = [q(0.25), q(0.5), q(0.75)];
    y.iter().map(|v| cuts.iter().filter(|c| v > c).count()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square independence test on a contingency table. Rows and
/// columns with zero total (zero expected count) are left out.
pub fn chi_square(table: &[Vec<f64>]) -> Option<ChiSquare> {
    let cols = table.first().map_or(0, Vec::len);
    let row_tot: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_tot: Vec<f64> = (0..cols).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let n: f64 = row_tot.iter().sum();
    let r = row_tot.iter().filter(|t| **t > 0.0).count();
    let c = col_tot.iter().filter(|t| **t > 0.0).count();
    if r < 2 || c < 2 {
        return None;
    }
    let mut stat = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let expected = row_tot[i] * col_tot[j] / n;
            if expected > 0.0 {
                stat += (obs - expected).powi(2) / expected;
            }
        }
    }
    let dof = (r - 1) * (c - 1);
    let p_value = ChiSquared::new(dof as f64).ok()?.sf(stat);
    Some(ChiSquare { statistic: stat, dof, p_value })
}

/// Scores categorical predictors with a chi-square test against the target's
/// quartile bin; keeps those with `p < threshold`.
pub fn select_categorical(dataset: &Dataset, threshold: f64) -> Result<Vec<FeatureScore>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(invalid(format!("p-value threshold {threshold} outside (0, 1]")));
    }
    let schema = dataset.schema();
    let ys: Vec<f64> = dataset.rows().iter().filter_map(|r| r[schema.target_index()].as_f64()).collect();
    if ys.is_empty() {
        return Err(Error::EmptyData);
    }
    let bins = quartile_bins(&ys);
    Ok(schema
        .predictor_indices()
        .into_iter()
        .filter(|&j| schema.columns()[j].kind == ColumnKind::Categorical)
        .map(|j| {
            let mut counts: BTreeMap<String, [f64; 4]> = BTreeMap::new();
            for ((v, _), &b) in complete_pairs(dataset, j).zip(&bins) {
                let level = v.as_text().unwrap_or(MISSING_LEVEL).to_string();
                counts.entry(level).or_default()[b] += 1.0;
            }
            let table: Vec<Vec<f64>> = counts.into_values().map(|c| c.to_vec()).collect();
            let p = chi_square(&table).map(|c| c.p_value);
            FeatureScore { column: schema.columns()[j].name.clone(), score: p, retained: p.is_some_and(|p| p < threshold) }
        })
        .collect())
}

/// Keeps identifiers, the target, and the retained predictors.
pub fn apply_selection(dataset: &Dataset, scores: &[FeatureScore]) -> Result<Dataset> {
    let dropped: Vec<String> = scores.iter().filter(|s| !s.retained).map(|s| s.column.clone()).collect();
    dataset.drop_columns(&dropped)
}

/// Filter thresholds; `None` keeps every column of that kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionThresholds {
    /// Minimum `|r|` for numeric predictors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numeric: Option<f64>,
    /// Maximum chi-square p-value for categorical predictors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categorical: Option<f64>,
}

impl SelectionThresholds {
    pub fn is_active(&self) -> bool {
        self.numeric.is_some() || self.categorical.is_some()
    }
}

/// Runs both filters and drops the rejected predictors.
pub fn select_features(dataset: &Dataset, thresholds: &SelectionThresholds) -> Result<(Dataset, Vec<FeatureScore>)> {
    let mut scores = Vec::new();
    if let Some(t) = thresholds.numeric {
        scores.extend(select_numeric(dataset, t)?);
    }
    if let Some(t) = thresholds.categorical {
        scores.extend(select_categorical(dataset, t)?);
    }
    if !scores.is_empty() && dataset.schema().predictor_indices().len() == scores.iter().filter(|s| !s.retained).count() {
        return Err(invalid("feature selection rejected every predictor"));
    }
    Ok((apply_selection(dataset, &scores)?, scores))
}

/// Rows `(lags, target)` where lags are `[y_{t-1}, ..., y_{t-L}]`.
pub fn lag_features(series: &[f64], lags: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    if lags == 0 {
        return Err(invalid("lag count must be at least 1"));
    }
    if series.len() <= lags {
        return Err(invalid(format!("series of length {} too short for {lags} lags", series.len())));
    }
    Ok((lags..series.len()).map(|t| ((1..=lags).map(|l| series[t - l]).collect(), series[t])).collect())
}

pub const GWA_TIMESTAMP: &str = "Timestamp [ms]";
pub const GWA_TARGET: &str = "CPU usage [MHZ]";
pub const GWA_CORES: &str = "CPU cores";
pub const GWA_NUMERIC: [&str; 8] = [
    "CPU capacity provisioned [MHZ]",
    "Memory capacity provisioned [KB]",
    "Memory usage [KB]",
    "Disk read throughput [KB/s]",
    "Disk write throughput [KB/s]",
    "Network received throughput [KB/s]",
    "Network transmitted throughput [KB/s]",
    "Disk size [GB]",
];

/// One VM's KPI trace, rows in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct GwaTrace {
    pub vm: String,
    pub timestamps: Vec<NaiveDateTime>,
    pub columns: BTreeMap<String, Vec<f64>>,
}

fn parse_decimal(s: &str) -> Option<f64> {
    let s = s.trim();
    s.parse::<f64>().ok().or_else(|| s.replace(',', ".").parse().ok()).filter(|v: &f64| v.is_finite())
}

/// Epoch values above 1e11 are read as milliseconds, smaller ones as seconds.
fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Some(v) = parse_decimal(s) {
        let ms = if v.abs() > 1e11 { v } else { v * 1000.0 };
        return DateTime::from_timestamp_millis(ms as i64).map(|d| d.naive_utc());
    }
    ["%d.%m.%Y %H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Reads a delimited VM trace. The timestamp and CPU usage columns are
/// required; other known KPI columns are kept when present.
pub fn read_gwa_trace<R: Read>(reader: R, vm: &str, delimiter: u8) -> Result<GwaTrace> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let ts = find(GWA_TIMESTAMP).or_else(|| find("Timestamp"));
    let wanted: Vec<&str> = [GWA_TARGET, GWA_CORES].into_iter().chain(GWA_NUMERIC).collect();
    let mut missing = Vec::new();
    if ts.is_none() {
        missing.push(GWA_TIMESTAMP.to_string());
    }
    if find(GWA_TARGET).is_none() {
        missing.push(GWA_TARGET.to_string());
    }
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }
    let ts = ts.expect("checked");
    let present: Vec<(&str, usize)> = wanted.into_iter().filter_map(|w| find(w).map(|j| (w, j))).collect();
    let mut trace = GwaTrace { vm: vm.to_string(), timestamps: Vec::new(), columns: BTreeMap::new() };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let t = parse_timestamp(rec.get(ts).unwrap_or(""))
            .ok_or_else(|| Error::Parse(format!("{vm} line {line}: bad timestamp `{}`", rec.get(ts).unwrap_or(""))))?;
        trace.timestamps.push(t);
        for &(name, j) in &present {
            let raw = rec.get(j).unwrap_or("");
            let v = parse_decimal(raw).ok_or_else(|| Error::Parse(format!("{vm} line {line}: `{raw}` in `{name}`")))?;
            trace.columns.entry(name.to_string()).or_default().push(v);
        }
    }
    Ok(trace)
}

pub fn lag_column(l: usize) -> String {
    format!("cpu_usage_lag{l}")
}

/// Lagged CPU-usage rows for every trace, with hour-of-day, day-of-week and
/// core count as categorical attributes. Lags never cross traces. The
/// current usage only appears as the target.
pub fn build_gwa_dataset(traces: &[GwaTrace], lags: usize) -> Result<Dataset> {
    if traces.is_empty() {
        return Err(Error::EmptyData);
    }
    let numeric: Vec<&str> = GWA_NUMERIC.into_iter().filter(|c| traces.iter().all(|t| t.columns.contains_key(*c))).collect();
    let has_cores = traces.iter().all(|t| t.columns.contains_key(GWA_CORES));
    let mut columns = vec![
        Column::new("vm", ColumnKind::Identifier),
        Column::new("hour", ColumnKind::Categorical),
        Column::new("weekday", ColumnKind::Categorical),
    ];
    if has_cores {
        columns.push(Column::new("cpu_cores", ColumnKind::Categorical));
    }
    columns.extend(numeric.iter().map(|c| Column::new(*c, ColumnKind::Numeric)));
    columns.extend((1..=lags).map(|l| Column::new(lag_column(l), ColumnKind::Numeric)));
    columns.push(Column::new(GWA_TARGET, ColumnKind::Numeric));
    let schema = FeatureSchema::new(columns, GWA_TARGET, "MHZ")?;
    let mut rows = Vec::new();
    for trace in traces {
        let usage = &trace.columns[GWA_TARGET];
        for (k, (lagged, y)) in lag_features(usage, lags)?.into_iter().enumerate() {
            let t = k + lags;
            let stamp = trace.timestamps[t];
            let mut row = vec![
                Value::Text(trace.vm.clone()),
                Value::Text(format!("{:02}", stamp.hour())),
                Value::Text(stamp.weekday().to_string()),
            ];
            if has_cores {
                row.push(Value::Text(format!("{}", trace.columns[GWA_CORES][t])));
            }
            row.extend(numeric.iter().map(|c| Value::Number(trace.columns[*c][t])));
            row.extend(lagged.into_iter().map(Value::Number));
            row.push(Value::Number(y));
            rows.push(row);
        }
    }
    Dataset::new(schema, rows)
}

/// Fill-in values learned from a training split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    pub medians: BTreeMap<String, f64>,
    /// Predictors with no observed value in the training split.
    pub dropped: Vec<String>,
}

impl Imputer {
    pub fn fit(train: &Dataset) -> Self {
        let schema = train.schema();
        let mut imp = Imputer::default();
        for j in schema.predictor_indices() {
            let col = &schema.columns()[j];
            let observed = train.rows().iter().filter(|r| !r[j].is_missing()).count();
            if observed == 0 {
                log::warn!("column `{}` has no values in the training data and is dropped", col.name);
                imp.dropped.push(col.name.clone());
            } else if col.kind == ColumnKind::Numeric {
                let mut v: Vec<f64> = train.rows().iter().filter_map(|r| r[j].as_f64()).collect();
                imp.medians.insert(col.name.clone(), median(&mut v));
            }
        }
        imp
    }

    /// Fills predictors (never the target) and drops all-missing columns.
    pub fn transform(&self, dataset: &Dataset) -> Result<Dataset> {
        let schema = dataset.schema();
        let fill: Vec<Option<Value>> = schema
            .columns()
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if j == schema.target_index() {
                    return None;
                }
                match c.kind {
                    ColumnKind::Numeric => self.medians.get(&c.name).map(|m| Value::Number(*m)),
                    ColumnKind::Categorical => Some(Value::from(MISSING_LEVEL)),
                    _ => None,
                }
            })
            .collect();
        let filled = dataset.map_values(|j, v| match (&fill[j], v) {
            (Some(f), Value::Missing) => f.clone(),
            _ => v.clone(),
        });
        let drop: Vec<String> = self.dropped.iter().filter(|n| schema.index_of(n).is_some()).cloned().collect();
        if drop.is_empty() {
            Ok(filled)
        } else {
            filled.drop_columns(&drop)
        }
    }
}

/// Median of observed values in a column, for independent checks.
pub fn column_median(dataset: &Dataset, name: &str) -> Option<f64> {
    let mut v: Vec<f64> = dataset.column(name)?.filter_map(Value::as_f64).collect();
    (!v.is_empty()).then(|| median(&mut v))
}

/// Empirical quantile of a numeric column's observed values.
pub fn column_quantile(dataset: &Dataset, name: &str, alpha: f64) -> Option<f64> {
    let v: Vec<f64> = dataset.column(name)?.filter_map(Value::as_f64).collect();
    (!v.is_empty()).then(|| empirical_quantile(&v, alpha))
}
