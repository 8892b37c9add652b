//! Portfolio representation, CSV ingestion and split/balance utilities.
//!
//! A portfolio file is UTF-8 CSV with a header row. Two reserved columns
//! carry the record token and the label:
//!
//! ```text
//! record_id,<feature>,<feature>,...,outcome
//! L000001,12500.5,north,...,1
//! ```
//!
//! Every other header must name exactly one schema entry and every schema
//! entry must appear (column order is free). Empty cells are missing values.
//! The outcome column accepts `1` (bad loan), `0` and an empty cell
//! (unlabeled). Numbers use `.` as the decimal separator regardless of
//! locale.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Domain};

/// Header of the record-token column.
pub const RECORD_ID_COLUMN: &str = "record_id";
/// Header of the label column.
pub const OUTCOME_COLUMN: &str = "outcome";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema parse error: {0}")]
    SchemaParse(String),
    #[error("duplicate feature name `{0}` in schema")]
    DuplicateFeature(String),
    #[error("feature name `{0}` is reserved")]
    ReservedName(String),
    #[error("column `{0}` is not in the schema")]
    UnknownColumn(String),
    #[error("schema feature `{0}` has no column in the file")]
    MissingColumn(String),
    #[error("column `{0}` appears more than once in the header")]
    DuplicateColumn(String),
    #[error("missing `{0}` column")]
    MissingReservedColumn(&'static str),
    #[error("row {row}, column `{column}`: cannot parse `{cell}` as {expected}")]
    TypeMismatch {
        row: usize,
        column: String,
        cell: String,
        expected: &'static str,
    },
    #[error("duplicate record_id `{0}`")]
    DuplicateRecordId(String),
    #[error("record `{record}` has {got} values for a schema of {expected} features")]
    Arity {
        record: String,
        got: usize,
        expected: usize,
    },
    #[error("record `{record}`: value for `{feature}` does not match kind {kind}")]
    KindMismatch {
        record: String,
        feature: String,
        kind: FeatureKind,
    },
    #[error("record `{0}` is unlabeled")]
    Unlabeled(String),
    #[error("portfolio contains a single outcome class")]
    SingleClass,
    #[error("fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("target positive fraction {target} requires dropping minority-class records (positives {positives}, negatives {negatives})")]
    UnachievableBalance {
        target: f64,
        positives: usize,
        negatives: usize,
    },
    #[error("feature `{0}` not present")]
    UnknownFeature(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical,
    Boolean,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Numeric => "numeric",
            FeatureKind::Categorical => "categorical",
            FeatureKind::Boolean => "boolean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyClass {
    DirectIdentifier,
    QuasiIdentifier,
    Free,
}

/// Protected categories a feature may encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasClass {
    CreditHistory,
    Gender,
    RaceEthnicity,
    None,
}

/// Which dataset(s) carry the feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Availability {
    TrainOnly,
    ValidationOnly,
    Common,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub privacy_class: PrivacyClass,
    pub bias_class: BiasClass,
    pub availability: Availability,
}

impl FeatureSpec {
    /// A free, unbiased, common feature.
    pub fn new(name: impl Into<String>, kind: FeatureKind) -> Self {
        FeatureSpec {
            name: name.into(),
            kind,
            privacy_class: PrivacyClass::Free,
            bias_class: BiasClass::None,
            availability: Availability::Common,
        }
    }

    pub fn with_privacy(mut self, class: PrivacyClass) -> Self {
        self.privacy_class = class;
        self
    }

    pub fn with_bias(mut self, class: BiasClass) -> Self {
        self.bias_class = class;
        self
    }

    pub fn with_availability(mut self, availability: Availability) -> Self {
        self.availability = availability;
        self
    }
}

/// Ordered feature metadata with unique names.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct FeatureSchema {
    features: Vec<FeatureSpec>,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    #[serde(default, rename = "feature")]
    features: Vec<FeatureSpec>,
}

impl<'de> Deserialize<'de> for FeatureSchema {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let features = Vec::<FeatureSpec>::deserialize(d)?;
        FeatureSchema::new(features).map_err(serde::de::Error::custom)
    }
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for f in &features {
            if f.name == RECORD_ID_COLUMN || f.name == OUTCOME_COLUMN {
                return Err(DataError::ReservedName(f.name.clone()));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(DataError::DuplicateFeature(f.name.clone()));
            }
        }
        Ok(FeatureSchema { features })
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    /// Entries carried by a portfolio of the given kind.
    pub fn for_kind(&self, kind: PortfolioKind) -> FeatureSchema {
        let features = self
            .features
            .iter()
            .filter(|f| match kind {
                PortfolioKind::TrainTest => f.availability != Availability::ValidationOnly,
                PortfolioKind::Validation => f.availability != Availability::TrainOnly,
                PortfolioKind::Synthetic => true,
            })
            .cloned()
            .collect();
        FeatureSchema { features }
    }

    /// Parses the TOML schema format (`[[feature]]` tables).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SchemaFile =
            toml::from_str(text).map_err(|e| DataError::SchemaParse(e.to_string()))?;
        FeatureSchema::new(file.features)
    }

    pub fn to_toml_string(&self) -> String {
        let file = SchemaFile {
            features: self.features.clone(),
        };
        toml::to_string(&file).expect("schema serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml_string()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// One cell. Booleans are stored as `Number(0.0)` / `Number(1.0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Missing,
    Number(f64),
    Symbol(String),
}

impl Value {
    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_symbol(&self) -> Option<&str> {
        match self {
            Value::Symbol(s) => Some(s),
            _ => None,
        }
    }

    fn conforms_to(&self, kind: FeatureKind) -> bool {
        match (self, kind) {
            (Value::Missing, _) => true,
            (Value::Number(x), FeatureKind::Numeric) => x.is_finite(),
            (Value::Number(x), FeatureKind::Boolean) => *x == 0.0 || *x == 1.0,
            (Value::Symbol(s), FeatureKind::Categorical) => !s.is_empty(),
            _ => false,
        }
    }

    fn render(&self, kind: FeatureKind) -> String {
        match self {
            Value::Missing => String::new(),
            Value::Number(x) if kind == FeatureKind::Boolean => {
                if *x == 1.0 { "1" } else { "0" }.to_string()
            }
            Value::Number(x) => format!("{x}"),
            Value::Symbol(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    BadLoan,
    NotBad,
    Unlabeled,
}

impl Outcome {
    pub fn from_label(label: u8) -> Self {
        if label == 1 {
            Outcome::BadLoan
        } else {
            Outcome::NotBad
        }
    }

    pub fn label(self) -> Option<u8> {
        match self {
            Outcome::BadLoan => Some(1),
            Outcome::NotBad => Some(0),
            Outcome::Unlabeled => None,
        }
    }
}

/// One exposure. `values` is aligned with the owning portfolio's schema.
#[derive(Debug, Clone, PartialEq)]
pub struct LoanRecord {
    pub record_id: String,
    pub values: Vec<Value>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortfolioKind {
    TrainTest,
    Validation,
    Synthetic,
}

/// A validated collection of records sharing one schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    schema: FeatureSchema,
    records: Vec<LoanRecord>,
    kind: PortfolioKind,
    /// Features whose values were perturbed by noising.
    perturbed: BTreeSet<String>,
}

impl Portfolio {
    pub fn new(
        schema: FeatureSchema,
        records: Vec<LoanRecord>,
        kind: PortfolioKind,
    ) -> Result<Self> {
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if !ids.insert(r.record_id.as_str()) {
                return Err(DataError::DuplicateRecordId(r.record_id.clone()));
            }
            if r.values.len() != schema.len() {
                return Err(DataError::Arity {
                    record: r.record_id.clone(),
                    got: r.values.len(),
                    expected: schema.len(),
                });
            }
            for (v, f) in r.values.iter().zip(schema.features()) {
                if !v.conforms_to(f.kind) {
                    return Err(DataError::KindMismatch {
                        record: r.record_id.clone(),
                        feature: f.name.clone(),
                        kind: f.kind,
                    });
                }
            }
        }
        Ok(Portfolio {
            schema,
            records,
            kind,
            perturbed: BTreeSet::new(),
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn records(&self) -> &[LoanRecord] {
        &self.records
    }

    pub fn kind(&self) -> PortfolioKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn perturbed_features(&self) -> &BTreeSet<String> {
        &self.perturbed
    }

    pub fn with_kind(mut self, kind: PortfolioKind) -> Self {
        self.kind = kind;
        self
    }

    /// Share of bad loans among labeled records; `None` when nothing is labeled.
    pub fn prevalence(&self) -> Option<f64> {
        let (pos, neg) = self.class_counts();
        let labeled = pos + neg;
        (labeled > 0).then(|| pos as f64 / labeled as f64)
    }

    /// `(positives, negatives)` among labeled records.
    pub fn class_counts(&self) -> (usize, usize) {
        self.records
            .iter()
            .fold((0, 0), |(p, n), r| match r.outcome {
                Outcome::BadLoan => (p + 1, n),
                Outcome::NotBad => (p, n + 1),
                Outcome::Unlabeled => (p, n),
            })
    }

    /// Labels of every record, failing on the first unlabeled one.
    pub fn labels(&self) -> Result<Vec<u8>> {
        self.records
            .iter()
            .map(|r| {
                r.outcome
                    .label()
                    .ok_or_else(|| DataError::Unlabeled(r.record_id.clone()))
            })
            .collect()
    }

    /// All values of one feature, in record order.
    pub fn column(&self, name: &str) -> Result<Vec<&Value>> {
        let idx = self
            .schema
            .index_of(name)
            .ok_or_else(|| DataError::UnknownFeature(name.to_string()))?;
        Ok(self.records.iter().map(|r| &r.values[idx]).collect())
    }

    /// Restricts the portfolio to the named features, in the given order.
    pub fn project(&self, names: &[impl AsRef<str>]) -> Result<Portfolio> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.schema
                    .index_of(n.as_ref())
                    .ok_or_else(|| DataError::UnknownFeature(n.as_ref().to_string()))
            })
            .collect::<Result<_>>()?;
        let schema = FeatureSchema::new(
            idx.iter()
                .map(|&i| self.schema.features[i].clone())
                .collect(),
        )?;
        let records = self
            .records
            .iter()
            .map(|r| LoanRecord {
                record_id: r.record_id.clone(),
                values: idx.iter().map(|&i| r.values[i].clone()).collect(),
                outcome: r.outcome,
            })
            .collect();
        let perturbed = self
            .perturbed
            .iter()
            .filter(|p| schema.index_of(p).is_some())
            .cloned()
            .collect();
        Ok(Portfolio {
            schema,
            records,
            kind: self.kind,
            perturbed,
        })
    }

    /// Keeps the records at `indices` (ascending, no repeats).
    pub(crate) fn subset(&self, indices: &[usize]) -> Portfolio {
        Portfolio {
            schema: self.schema.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            kind: self.kind,
            perturbed: self.perturbed.clone(),
        }
    }

    pub(crate) fn from_parts_unchecked(
        schema: FeatureSchema,
        records: Vec<LoanRecord>,
        kind: PortfolioKind,
        perturbed: BTreeSet<String>,
    ) -> Portfolio {
        Portfolio {
            schema,
            records,
            kind,
            perturbed,
        }
    }

    /// Writes the portfolio in the CSV layout described at module level.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![RECORD_ID_COLUMN];
        header.extend(self.schema.names());
        header.push(OUTCOME_COLUMN);
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for r in &self.records {
            row.clear();
            row.push(r.record_id.clone());
            for (v, f) in r.values.iter().zip(self.schema.features()) {
                row.push(v.render(f.kind));
            }
            row.push(match r.outcome {
                Outcome::BadLoan => "1".into(),
                Outcome::NotBad => "0".into(),
                Outcome::Unlabeled => String::new(),
            });
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| DataError::Csv(e.into()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Reads a portfolio file against `schema`.
pub fn ingest_csv(
    path: impl AsRef<Path>,
    schema: &FeatureSchema,
    kind: PortfolioKind,
) -> Result<Portfolio> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(std::io::BufReader::new(file), schema, kind)
}

pub fn read_csv<R: Read>(
    reader: R,
    schema: &FeatureSchema,
    kind: PortfolioKind,
) -> Result<Portfolio> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::None)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();

    let mut id_col = None;
    let mut outcome_col = None;
    // column position -> schema index
    let mut mapping: Vec<Option<usize>> = vec![None; headers.len()];
    let mut seen = HashSet::new();
    for (pos, h) in headers.iter().enumerate() {
        if !seen.insert(h) {
            return Err(DataError::DuplicateColumn(h.to_string()));
        }
        match h {
            RECORD_ID_COLUMN => id_col = Some(pos),
            OUTCOME_COLUMN => outcome_col = Some(pos),
            _ => {
                let idx = schema
                    .index_of(h)
                    .ok_or_else(|| DataError::UnknownColumn(h.to_string()))?;
                mapping[pos] = Some(idx);
            }
        }
    }
    let id_col = id_col.ok_or(DataError::MissingReservedColumn(RECORD_ID_COLUMN))?;
    let outcome_col = outcome_col.ok_or(DataError::MissingReservedColumn(OUTCOME_COLUMN))?;
    if let Some(missing) = schema.names().find(|n| !seen.contains(n)) {
        return Err(DataError::MissingColumn(missing.to_string()));
    }

    let mut records = Vec::new();
    let mut ids: HashMap<String, ()> = HashMap::new();
    for (row_no, row) in rdr.records().enumerate() {
        let row = row?;
        // 1-based data row number, header excluded
        let row_no = row_no + 1;
        let record_id = row.get(id_col).unwrap_or_default().to_string();
        if ids.insert(record_id.clone(), ()).is_some() {
            return Err(DataError::DuplicateRecordId(record_id));
        }
        let mut values = vec![Value::Missing; schema.len()];
        for (pos, cell) in row.iter().enumerate() {
            let Some(idx) = mapping[pos] else { continue };
            let spec = &schema.features()[idx];
            values[idx] = parse_cell(cell, spec, row_no)?;
        }
        let outcome = match row.get(outcome_col).unwrap_or_default().trim() {
            "1" => Outcome::BadLoan,
            "0" => Outcome::NotBad,
            "" => Outcome::Unlabeled,
            other => {
                return Err(DataError::TypeMismatch {
                    row: row_no,
                    column: OUTCOME_COLUMN.to_string(),
                    cell: other.to_string(),
                    expected: "outcome (0, 1 or empty)",
                })
            }
        };
        records.push(LoanRecord {
            record_id,
            values,
            outcome,
        });
    }
    Portfolio::new(schema.clone(), records, kind)
}

fn parse_cell(cell: &str, spec: &FeatureSpec, row: usize) -> Result<Value> {
    let trimmed = cell.trim();
    if trimmed.is_empty() {
        return Ok(Value::Missing);
    }
    let mismatch = |expected| DataError::TypeMismatch {
        row,
        column: spec.name.clone(),
        cell: cell.to_string(),
        expected,
    };
    match spec.kind {
        FeatureKind::Numeric => match trimmed.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(Value::Number(x)),
            _ => Err(mismatch("a finite number")),
        },
        FeatureKind::Boolean => match trimmed {
            "1" | "true" | "TRUE" | "True" => Ok(Value::Number(1.0)),
            "0" | "false" | "FALSE" | "False" => Ok(Value::Number(0.0)),
            _ => Err(mismatch("a boolean")),
        },
        FeatureKind::Categorical => Ok(Value::Symbol(cell.to_string())),
    }
}

fn class_indices(p: &Portfolio) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, r) in p.records.iter().enumerate() {
        match r.outcome {
            Outcome::BadLoan => pos.push(i),
            Outcome::NotBad => neg.push(i),
            Outcome::Unlabeled => return Err(DataError::Unlabeled(r.record_id.clone())),
        }
    }
    Ok((pos, neg))
}

/// Splits into `(rest, test)`, taking `round(n_class * test_fraction)` records
/// of each class into the test part. Records keep their original order
/// within each part.
pub fn stratified_split(
    p: &Portfolio,
    test_fraction: f64,
    seed: u64,
) -> Result<(Portfolio, Portfolio)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidFraction(test_fraction));
    }
    let (pos, neg) = class_indices(p)?;
    if pos.is_empty() || neg.is_empty() {
        return Err(DataError::SingleClass);
    }
    let mut in_test = vec![false; p.len()];
    for (class_no, mut idx) in [pos, neg].into_iter().enumerate() {
        let take = (idx.len() as f64 * test_fraction).round() as usize;
        idx.shuffle(&mut rng::substream(seed, Domain::Split, class_no as u64));
        for &i in &idx[..take] {
            in_test[i] = true;
        }
    }
    let (test, rest): (Vec<usize>, Vec<usize>) = (0..p.len()).partition(|&i| in_test[i]);
    Ok((p.subset(&rest), p.subset(&test)))
}

/// Undersamples the majority class so that the positive share hits
/// `target_positive_fraction` (to within one record).
pub fn balance_by_undersampling(
    p: &Portfolio,
    target_positive_fraction: f64,
    seed: u64,
) -> Result<Portfolio> {
    let t = target_positive_fraction;
    if !(t > 0.0 && t < 1.0) {
        return Err(DataError::InvalidFraction(t));
    }
    let (pos, neg) = class_indices(p)?;
    let (np, nn) = (pos.len(), neg.len());
    let unachievable = || DataError::UnachievableBalance {
        target: t,
        positives: np,
        negatives: nn,
    };
    if np == 0 || nn == 0 {
        return Err(unachievable());
    }
    let current = np as f64 / (np + nn) as f64;

    // Decide which class shrinks and to what size.
    let (mut shrink, keep, other) = if t >= current {
        let keep = ((np as f64) * (1.0 - t) / t).round() as usize;
        (neg, keep.min(nn), np)
    } else {
        let keep = ((nn as f64) * t / (1.0 - t)).round() as usize;
        (pos, keep.min(np), nn)
    };
    if keep == shrink.len() {
        return Ok(p.clone());
    }
    if shrink.len() < other {
        return Err(unachievable());
    }
    shrink.shuffle(&mut rng::substream(seed, Domain::Balance, 0));
    let dropped: HashSet<usize> = shrink[keep..].iter().copied().collect();
    let kept: Vec<usize> = (0..p.len()).filter(|i| !dropped.contains(i)).collect();
    Ok(p.subset(&kept))
}
