//! Tabular data model: schemas, mixed-type rows, one-hot encoding and
//! k-fold splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Date,
    Identifier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Self { name: name.into(), kind }
    }
}

/// Column layout of a dataset plus the name of the numeric target.
///
/// Date and identifier columns are carried through but never encoded as
/// predictors; derive calendar features from dates before modelling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    columns: Vec<Column>,
    target: String,
    #[serde(default)]
    units: String,
}

impl FeatureSchema {
    pub fn new(columns: Vec<Column>, target: impl Into<String>, units: impl Into<String>) -> Result<Self> {
        let schema = Self { columns, target: target.into(), units: units.into() };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name `{}`", c.name)));
            }
        }
        match self.columns.iter().find(|c| c.name == self.target) {
            None => return Err(Error::Schema(format!("target column `{}` not found", self.target))),
            Some(c) if c.kind != ColumnKind::Numeric => {
                return Err(Error::Schema(format!("target column `{}` is not numeric", self.target)))
            }
            _ => {}
        }
        if self.predictor_indices().is_empty() {
            return Err(Error::Schema("no predictor columns remain after excluding target and identifiers".into()));
        }
        Ok(())
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn units(&self) -> &str {
        &self.units
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn target_index(&self) -> usize {
        self.index_of(&self.target).expect("validated schema has its target")
    }

    /// Indices of numeric and categorical columns other than the target.
    pub fn predictor_indices(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.name != self.target && matches!(c.kind, ColumnKind::Numeric | ColumnKind::Categorical))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn kind_of(&self, name: &str) -> Option<ColumnKind> {
        self.index_of(name).map(|i| self.columns[i].kind)
    }

    /// Schema with the named columns removed. Fails if the target is removed
    /// or no predictors remain.
    pub fn without(&self, names: &[String]) -> Result<Self> {
        let columns = self.columns.iter().filter(|c| !names.contains(&c.name)).cloned().collect();
        Self::new(columns, self.target.clone(), self.units.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Number(f64),
    Text(String),
    Missing,
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    fn render(&self) -> String {
        match self {
            Value::Number(v) => format!("{v}"),
            Value::Text(s) => s.clone(),
            Value::Missing => String::new(),
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Number(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: FeatureSchema,
    rows: Vec<Vec<Value>>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, rows: Vec<Vec<Value>>) -> Result<Self> {
        let width = schema.columns().len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Schema(format!("row {i} has {} values, schema has {width} columns", row.len())));
            }
            for (col, v) in schema.columns().iter().zip(row) {
                let ok = match (col.kind, v) {
                    (_, Value::Missing) => true,
                    (ColumnKind::Numeric, Value::Number(x)) => x.is_finite(),
                    (ColumnKind::Numeric, Value::Text(_)) => false,
                    (_, Value::Text(_)) => true,
                    (_, Value::Number(_)) => false,
                };
                if !ok {
                    return Err(Error::Schema(format!("row {i}: value {v:?} does not fit column `{}` ({:?})", col.name, col.kind)));
                }
            }
        }
        Ok(Self { schema, rows })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn rows(&self) -> &[Vec<Value>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<impl Iterator<Item = &Value> + '_> {
        let j = self.schema.index_of(name)?;
        Some(self.rows.iter().map(move |r| &r[j]))
    }

    /// Target values; fails if any are missing.
    pub fn target(&self) -> Result<Vec<f64>> {
        let j = self.schema.target_index();
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| r[j].as_f64().ok_or_else(|| Error::Schema(format!("row {i}: missing target value"))))
            .collect()
    }

    pub fn has_missing(&self) -> bool {
        self.rows.iter().any(|r| r.iter().any(Value::is_missing))
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset { schema: self.schema.clone(), rows: indices.iter().map(|&i| self.rows[i].clone()).collect() }
    }

    pub fn filter_rows(&self, mut keep: impl FnMut(&[Value]) -> bool) -> Dataset {
        Dataset { schema: self.schema.clone(), rows: self.rows.iter().filter(|r| keep(r)).cloned().collect() }
    }

    pub fn drop_columns(&self, names: &[String]) -> Result<Dataset> {
        let schema = self.schema.without(names)?;
        let keep: Vec<usize> = self
            .schema
            .columns()
            .iter()
            .enumerate()
            .filter(|(_, c)| !names.contains(&c.name))
            .map(|(i, _)| i)
            .collect();
        let rows = self.rows.iter().map(|r| keep.iter().map(|&j| r[j].clone()).collect()).collect();
        Ok(Dataset { schema, rows })
    }

    pub(crate) fn map_values(&self, mut f: impl FnMut(usize, &Value) -> Value) -> Dataset {
        let rows = self.rows.iter().map(|r| r.iter().enumerate().map(|(j, v)| f(j, v)).collect()).collect();
        Dataset { schema: self.schema.clone(), rows }
    }

    pub fn write_csv<W: Write>(&self, writer: W, delimiter: u8) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
        w.write_record(self.schema.columns().iter().map(|c| c.name.as_str()))?;
        for row in &self.rows {
            w.write_record(row.iter().map(Value::render))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Options for reading a generic CSV file into a [`Dataset`].
#[derive(Clone, Debug)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub target: String,
    pub units: String,
    /// Explicit column kinds; columns not listed are inferred.
    pub kinds: BTreeMap<String, ColumnKind>,
}

impl CsvOptions {
    pub fn new(target: impl Into<String>) -> Self {
        Self { delimiter: b',', target: target.into(), units: String::new(), kinds: BTreeMap::new() }
    }
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a headed CSV. A column without an explicit kind is numeric when all
/// non-empty values parse as decimals, categorical otherwise.
pub fn read_csv<R: Read>(reader: R, opts: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(opts.delimiter).has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut raw: Vec<Vec<String>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        raw.push(rec.iter().map(|s| s.trim().to_string()).collect());
    }
    for name in opts.kinds.keys() {
        if !header.contains(name) {
            return Err(Error::MissingColumns(vec![name.clone()]));
        }
    }
    let columns: Vec<Column> = header
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let kind = opts.kinds.get(name).copied().unwrap_or_else(|| {
                let numeric = raw.iter().map(|r| r[j].as_str()).filter(|s| !s.is_empty()).all(|s| parse_number(s).is_some());
                if numeric {
                    ColumnKind::Numeric
                } else {
                    ColumnKind::Categorical
                }
            });
            Column::new(name.clone(), kind)
        })
        .collect();
    let schema = FeatureSchema::new(columns, opts.target.clone(), opts.units.clone())?;
    let mut rows = Vec::with_capacity(raw.len());
    for (i, r) in raw.into_iter().enumerate() {
        let row = r
            .into_iter()
            .zip(schema.columns())
            .map(|(s, c)| {
                if s.is_empty() {
                    return Ok(Value::Missing);
                }
                match c.kind {
                    ColumnKind::Numeric => parse_number(&s)
                        .map(Value::Number)
                        .ok_or_else(|| Error::Parse(format!("row {}: `{s}` in numeric column `{}`", i + 1, c.name))),
                    _ => Ok(Value::Text(s)),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Dataset::new(schema, rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnOrigin {
    FromCategorical,
    FromNumeric,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedColumn {
    pub source: String,
    pub level: Option<String>,
    pub origin: ColumnOrigin,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PredictorEncoding {
    Numeric { name: String },
    Categorical { name: String, levels: Vec<String> },
}

impl PredictorEncoding {
    pub fn name(&self) -> &str {
        match self {
            PredictorEncoding::Numeric { name } | PredictorEncoding::Categorical { name, .. } => name,
        }
    }

    fn width(&self) -> usize {
        match self {
            PredictorEncoding::Numeric { .. } => 1,
            PredictorEncoding::Categorical { levels, .. } => levels.len(),
        }
    }
}

/// Learned one-hot layout. All observed levels are kept (no reference level
/// is dropped); levels are sorted lexicographically and an unseen level
/// encodes to all zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalEncoding {
    predictors: Vec<PredictorEncoding>,
}

impl CategoricalEncoding {
    pub fn fit(dataset: &Dataset) -> Self {
        let schema = dataset.schema();
        let predictors = schema
            .predictor_indices()
            .into_iter()
            .map(|j| {
                let col = &schema.columns()[j];
                match col.kind {
                    ColumnKind::Categorical => {
                        let levels: BTreeSet<&str> = dataset.rows().iter().filter_map(|r| r[j].as_text()).collect();
                        PredictorEncoding::Categorical {
                            name: col.name.clone(),
                            levels: levels.into_iter().map(str::to_string).collect(),
                        }
                    }
                    _ => PredictorEncoding::Numeric { name: col.name.clone() },
                }
            })
            .collect();
        Self { predictors }
    }

    pub fn predictors(&self) -> &[PredictorEncoding] {
        &self.predictors
    }

    pub fn width(&self) -> usize {
        self.predictors.iter().map(PredictorEncoding::width).sum()
    }

    /// Total number of indicator columns.
    pub fn categorical_width(&self) -> usize {
        self.predictors
            .iter()
            .filter(|p| matches!(p, PredictorEncoding::Categorical { .. }))
            .map(PredictorEncoding::width)
            .sum()
    }

    pub fn columns(&self) -> Vec<EncodedColumn> {
        let mut out = Vec::with_capacity(self.width());
        for p in &self.predictors {
            match p {
                PredictorEncoding::Numeric { name } => {
                    out.push(EncodedColumn { source: name.clone(), level: None, origin: ColumnOrigin::FromNumeric })
                }
                PredictorEncoding::Categorical { name, levels } => out.extend(levels.iter().map(|l| EncodedColumn {
                    source: name.clone(),
                    level: Some(l.clone()),
                    origin: ColumnOrigin::FromCategorical,
                })),
            }
        }
        out
    }

    /// Predictor columns of this encoding absent from `schema`.
    pub fn missing_columns(&self, schema: &FeatureSchema) -> Vec<String> {
        self.predictors.iter().map(|p| p.name().to_string()).filter(|n| schema.index_of(n).is_none()).collect()
    }

    fn lookup(&self, schema: &FeatureSchema) -> Result<Vec<usize>> {
        let missing = self.missing_columns(schema);
        if !missing.is_empty() {
            return Err(Error::MissingColumns(missing));
        }
        Ok(self.predictors.iter().map(|p| schema.index_of(p.name()).unwrap()).collect())
    }

    fn encode_into(&self, positions: &[usize], row: &[Value], out: &mut Vec<f64>) -> Result<()> {
        for (p, &j) in self.predictors.iter().zip(positions) {
            match p {
                PredictorEncoding::Numeric { name } => match &row[j] {
                    Value::Number(v) => out.push(*v),
                    Value::Missing => return Err(Error::Schema(format!("missing value in `{name}`; impute first"))),
                    Value::Text(s) => return Err(Error::Parse(format!("`{s}` in numeric column `{name}`"))),
                },
                PredictorEncoding::Categorical { name, levels } => {
                    let label = match &row[j] {
                        Value::Text(s) => s.clone(),
                        Value::Number(v) => format!("{v}"),
                        Value::Missing => return Err(Error::Schema(format!("missing value in `{name}`; impute first"))),
                    };
                    let hit = levels.binary_search(&label).ok();
                    out.extend((0..levels.len()).map(|l| if Some(l) == hit { 1.0 } else { 0.0 }));
                }
            }
        }
        Ok(())
    }

    /// Encodes one raw row laid out according to `schema`.
    pub fn encode_row(&self, schema: &FeatureSchema, row: &[Value]) -> Result<Vec<f64>> {
        if row.len() != schema.columns().len() {
            return Err(Error::DimensionMismatch { expected: schema.columns().len(), got: row.len() });
        }
        let positions = self.lookup(schema)?;
        let mut out = Vec::with_capacity(self.width());
        self.encode_into(&positions, row, &mut out)?;
        Ok(out)
    }

    /// Encodes every row of `dataset`; the target is not required.
    pub fn transform(&self, dataset: &Dataset) -> Result<EncodedMatrix> {
        let positions = self.lookup(dataset.schema())?;
        let mut data = Vec::with_capacity(dataset.len() * self.width());
        for row in dataset.rows() {
            self.encode_into(&positions, row, &mut data)?;
        }
        Ok(EncodedMatrix { n_rows: dataset.len(), n_cols: self.width(), data, columns: self.columns() })
    }
}

/// Dense row-major design matrix with a column map back to the schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
    columns: Vec<EncodedColumn>,
}

impl EncodedMatrix {
    pub fn from_rows(rows: &[Vec<f64>], columns: Vec<EncodedColumn>) -> Result<Self> {
        let n_cols = columns.len();
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            if r.len() != n_cols {
                return Err(Error::DimensionMismatch { expected: n_cols, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { n_rows: rows.len(), n_cols, data, columns })
    }

    /// Matrix whose columns are all marked numeric, named `x0, x1, ...`.
    pub fn numeric(rows: &[Vec<f64>], n_cols: usize) -> Result<Self> {
        let columns = (0..n_cols)
            .map(|j| EncodedColumn { source: format!("x{j}"), level: None, origin: ColumnOrigin::FromNumeric })
            .collect();
        Self::from_rows(rows, columns)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn columns(&self) -> &[EncodedColumn] {
        &self.columns
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_cols.max(1)).take(self.n_rows)
    }

    pub fn categorical_columns(&self) -> Vec<usize> {
        self.columns.iter().enumerate().filter(|(_, c)| c.origin == ColumnOrigin::FromCategorical).map(|(j, _)| j).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> EncodedMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.n_cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EncodedMatrix { n_rows: indices.len(), n_cols: self.n_cols, data, columns: self.columns.clone() }
    }

    pub fn select_columns(&self, cols: &[usize]) -> EncodedMatrix {
        let mut data = Vec::with_capacity(self.n_rows * cols.len());
        for i in 0..self.n_rows {
            let r = self.row(i);
            data.extend(cols.iter().map(|&j| r[j]));
        }
        EncodedMatrix {
            n_rows: self.n_rows,
            n_cols: cols.len(),
            data,
            columns: cols.iter().map(|&j| self.columns[j].clone()).collect(),
        }
    }
}

/// Encodes a preprocessed dataset. Without an `encoding` the levels are
/// learned from the data; with one, the supplied levels are reused.
pub fn encode(dataset: &Dataset, encoding: Option<&CategoricalEncoding>) -> Result<(EncodedMatrix, Vec<f64>, CategoricalEncoding)> {
    if dataset.is_empty() {
        return Err(Error::EmptyData);
    }
    let encoding = match encoding {
        Some(e) => e.clone(),
        None => CategoricalEncoding::fit(dataset),
    };
    let y = dataset.target()?;
    let x = encoding.transform(dataset)?;
    Ok((x, y, encoding))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled k-fold split of `0..n`. Test folds are disjoint, cover every
/// index and differ in size by at most one.
pub fn split_kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(invalid(format!("k = {k} exceeds row count {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test = order[start..start + size].to_vec();
        test.sort_unstable();
        start += size;
        let mut is_test = vec![false; n];
        for &i in &test {
            is_test[i] = true;
        }
        let train = (0..n).filter(|&i| !is_test[i]).collect();
        folds.push(Fold { train, test });
    }
    Ok(folds)
}
