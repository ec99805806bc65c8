//! Relations, training sets, CSV ingestion and label corruption.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    MissingFile(String),
    #[error("io error reading {path}: {message}")]
    Io { path: String, message: String },
    #[error("header mismatch: expected columns {expected:?}, found {found:?}")]
    HeaderMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("line {line}: cannot parse {value:?} in column {column} as {kind}")]
    BadCell {
        line: usize,
        column: String,
        value: String,
        kind: ColumnKind,
    },
    #[error("line {line}: expected {expected} cells, found {found}")]
    RowWidth {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("column {0} is not part of the schema")]
    UnknownColumn(String),
    #[error("column {column} must be numeric to be used as a feature, found {kind}")]
    NonNumericFeature { column: String, kind: ColumnKind },
    #[error("duplicate id {0}")]
    DuplicateId(i64),
    #[error("label {label} of record {id} is outside [0, {classes})")]
    LabelOutOfRange { id: i64, label: usize, classes: usize },
    #[error("record {id} has {found} features, expected {expected}")]
    FeatureArity { id: i64, expected: usize, found: usize },
    #[error("invalid corruption spec: {0}")]
    InvalidCorruption(String),
    #[error("a classifier needs at least two classes")]
    TooFewClasses,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Integer,
    Real,
    Text,
    Boolean,
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ColumnKind::Integer => "integer",
            ColumnKind::Real => "real",
            ColumnKind::Text => "text",
            ColumnKind::Boolean => "boolean",
        };
        f.write_str(name)
    }
}

/// A single cell value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Real(f64),
    Text(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(v) => Some(*v as f64),
            Value::Real(v) => Some(*v),
            Value::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
            Value::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            Value::Bool(_) => ColumnKind::Boolean,
            Value::Int(_) => ColumnKind::Integer,
            Value::Real(_) => ColumnKind::Real,
            Value::Text(_) => ColumnKind::Text,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Value::Bool(_) => 0,
            Value::Int(_) | Value::Real(_) => 1,
            Value::Text(_) => 2,
        }
    }
}

// Numbers compare by value across Int/Real so that group keys built from
// integer and real arithmetic agree.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Value {}

impl std::hash::Hash for Value {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.rank().hash(state);
        match self {
            Value::Bool(b) => b.hash(state),
            Value::Text(s) => s.hash(state),
            n => n.as_f64().unwrap().to_bits().hash(state),
        }
    }
}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Value::Bool(a), Value::Bool(b)) => a.cmp(b),
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (a, b) if a.rank() == 1 && b.rank() == 1 => {
                a.as_f64().unwrap().total_cmp(&b.as_f64().unwrap())
            }
            (a, b) => a.rank().cmp(&b.rank()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(v) => write!(f, "{v}"),
            Value::Real(v) => write!(f, "{v}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub id: i64,
    pub values: Vec<Value>,
}

/// A queried relation. The id column is part of the schema and is
/// mirrored into `Row::id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub schema: Vec<Column>,
    pub id_column: String,
    pub rows: Vec<Row>,
}

impl Relation {
    pub fn new(
        name: impl Into<String>,
        schema: Vec<Column>,
        id_column: impl Into<String>,
        rows: Vec<Row>,
    ) -> Result<Self, DataError> {
        let rel = Self {
            name: name.into(),
            schema,
            id_column: id_column.into(),
            rows,
        };
        rel.check()?;
        Ok(rel)
    }

    fn check(&self) -> Result<(), DataError> {
        if self.column_index(&self.id_column).is_none() {
            return Err(DataError::UnknownColumn(self.id_column.clone()));
        }
        let mut seen = HashSet::new();
        for (i, row) in self.rows.iter().enumerate() {
            if !seen.insert(row.id) {
                return Err(DataError::DuplicateId(row.id));
            }
            if row.values.len() != self.schema.len() {
                return Err(DataError::RowWidth {
                    line: i + 2,
                    expected: self.schema.len(),
                    found: row.values.len(),
                });
            }
            for (col, v) in self.schema.iter().zip(&row.values) {
                if v.kind() != col.kind {
                    return Err(DataError::BadCell {
                        line: i + 2,
                        column: col.name.clone(),
                        value: v.to_string(),
                        kind: col.kind,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|c| c.name == name)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Extracts the named numeric columns of every row as a feature matrix.
    pub fn feature_matrix(&self, columns: &[String]) -> Result<Vec<Vec<f64>>, DataError> {
        let idx = columns
            .iter()
            .map(|c| {
                let i = self
                    .column_index(c)
                    .ok_or_else(|| DataError::UnknownColumn(c.clone()))?;
                match self.schema[i].kind {
                    ColumnKind::Integer | ColumnKind::Real | ColumnKind::Boolean => Ok(i),
                    kind => Err(DataError::NonNumericFeature {
                        column: c.clone(),
                        kind,
                    }),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self
            .rows
            .iter()
            .map(|r| idx.iter().map(|&i| r.values[i].as_f64().unwrap()).collect())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub id: i64,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub records: Vec<TrainingRecord>,
    pub dim: usize,
    pub classes: usize,
    #[serde(default)]
    pub feature_names: Vec<String>,
}

impl TrainingSet {
    pub fn new(
        records: Vec<TrainingRecord>,
        dim: usize,
        classes: usize,
    ) -> Result<Self, DataError> {
        let feature_names = (0..dim).map(|i| format!("x{i}")).collect();
        Self::with_names(records, dim, classes, feature_names)
    }

    pub fn with_names(
        records: Vec<TrainingRecord>,
        dim: usize,
        classes: usize,
        feature_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if classes < 2 {
            return Err(DataError::TooFewClasses);
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id) {
                return Err(DataError::DuplicateId(r.id));
            }
            if r.features.len() != dim {
                return Err(DataError::FeatureArity {
                    id: r.id,
                    expected: dim,
                    found: r.features.len(),
                });
            }
            if r.label >= classes {
                return Err(DataError::LabelOutOfRange {
                    id: r.id,
                    label: r.label,
                    classes,
                });
            }
        }
        Ok(Self {
            records,
            dim,
            classes,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<i64> {
        self.records.iter().map(|r| r.id).collect()
    }

    /// Copy of the set without the given record ids, order preserved.
    pub fn without(&self, removed: &HashSet<i64>) -> TrainingSet {
        TrainingSet {
            records: self
                .records
                .iter()
                .filter(|r| !removed.contains(&r.id))
                .cloned()
                .collect(),
            dim: self.dim,
            classes: self.classes,
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Either kind of table `load_csv` can produce.
#[derive(Debug, Clone, PartialEq)]
pub enum Table {
    Relation(Relation),
    Training(TrainingSet),
}

fn parse_cell(raw: &str, kind: ColumnKind) -> Option<Value> {
    let s = raw.trim();
    match kind {
        ColumnKind::Integer => s.parse().ok().map(Value::Int),
        ColumnKind::Real => s.parse().ok().map(Value::Real),
        ColumnKind::Boolean => match s.to_ascii_lowercase().as_str() {
            "true" | "1" | "t" | "yes" => Some(Value::Bool(true)),
            "false" | "0" | "f" | "no" => Some(Value::Bool(false)),
            _ => None,
        },
        ColumnKind::Text => Some(Value::Text(raw.to_string())),
    }
}

fn read_rows(path: &Path, schema: &[Column]) -> Result<Vec<Vec<Value>>, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.display().to_string()));
    }
    let io_err = |e: csv::Error| DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(io_err)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(io_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let expected: Vec<String> = schema.iter().map(|c| c.name.clone()).collect();
    if header != expected {
        return Err(DataError::HeaderMismatch {
            expected,
            found: header,
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(io_err)?;
        if rec.len() != schema.len() {
            return Err(DataError::RowWidth {
                line,
                expected: schema.len(),
                found: rec.len(),
            });
        }
        let values = rec
            .iter()
            .zip(schema)
            .map(|(cell, col)| {
                parse_cell(cell, col.kind).ok_or_else(|| DataError::BadCell {
                    line,
                    column: col.name.clone(),
                    value: cell.to_string(),
                    kind: col.kind,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(values);
    }
    Ok(rows)
}

/// Loads a headered CSV file. With a label column the result is a
/// training set whose features are every other numeric column; otherwise a
/// relation named after the file stem.
pub fn load_csv(
    path: &Path,
    schema: &[Column],
    id_column: &str,
    label_column: Option<&str>,
) -> Result<Table, DataError> {
    match label_column {
        Some(label) => load_training_set(path, schema, id_column, label, None).map(Table::Training),
        None => {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            load_relation(path, &name, schema, id_column).map(Table::Relation)
        }
    }
}

pub fn load_relation(
    path: &Path,
    name: &str,
    schema: &[Column],
    id_column: &str,
) -> Result<Relation, DataError> {
    let id_idx = schema
        .iter()
        .position(|c| c.name == id_column)
        .ok_or_else(|| DataError::UnknownColumn(id_column.to_string()))?;
    if schema[id_idx].kind != ColumnKind::Integer {
        return Err(DataError::BadCell {
            line: 1,
            column: id_column.to_string(),
            value: schema[id_idx].kind.to_string(),
            kind: ColumnKind::Integer,
        });
    }
    let rows = read_rows(path, schema)?
        .into_iter()
        .map(|values| {
            let id = match values[id_idx] {
                Value::Int(v) => v,
                _ => unreachable!("id column is integer"),
            };
            Row { id, values }
        })
        .collect();
    Relation::new(name, schema.to_vec(), id_column, rows)
}

/// Loads a training set. `classes` defaults to `max(label) + 1`, at least 2.
pub fn load_training_set(
    path: &Path,
    schema: &[Column],
    id_column: &str,
    label_column: &str,
    classes: Option<usize>,
) -> Result<TrainingSet, DataError> {
    let find = |name: &str| {
        schema
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    };
    let id_idx = find(id_column)?;
    let label_idx = find(label_column)?;
    let feature_idx: Vec<usize> = (0..schema.len())
        .filter(|&i| i != id_idx && i != label_idx)
        .collect();
    for &i in &feature_idx {
        if schema[i].kind == ColumnKind::Text {
            return Err(DataError::NonNumericFeature {
                column: schema[i].name.clone(),
                kind: ColumnKind::Text,
            });
        }
    }
    let rows = read_rows(path, schema)?;
    let mut records = Vec::with_capacity(rows.len());
    for (i, values) in rows.iter().enumerate() {
        let line = i + 2;
        let id = match &values[id_idx] {
            Value::Int(v) => *v,
            other => {
                return Err(DataError::BadCell {
                    line,
                    column: id_column.to_string(),
                    value: other.to_string(),
                    kind: ColumnKind::Integer,
                })
            }
        };
        let label = match values[label_idx].as_f64() {
            Some(v) if v >= 0.0 && v.fract() == 0.0 => v as usize,
            _ => {
                return Err(DataError::BadCell {
                    line,
                    column: label_column.to_string(),
                    value: values[label_idx].to_string(),
                    kind: ColumnKind::Integer,
                })
            }
        };
        let features = feature_idx
            .iter()
            .map(|&j| values[j].as_f64().unwrap())
            .collect();
        records.push(TrainingRecord {
            id,
            features,
            label,
        });
    }
    let classes = classes.unwrap_or_else(|| {
        records
            .iter()
            .map(|r| r.label + 1)
            .max()
            .unwrap_or(2)
            .max(2)
    });
    let names = feature_idx.iter().map(|&i| schema[i].name.clone()).collect();
    TrainingSet::with_names(records, feature_idx.len(), classes, names)
}

/// One conjunct of a corruption predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "test", rename_all = "snake_case")]
pub enum Condition {
    /// `min <= features[index] <= max`
    FeatureRange { index: usize, min: f64, max: f64 },
    LabelEq { label: usize },
}

impl Condition {
    fn matches(&self, r: &TrainingRecord) -> bool {
        match *self {
            Condition::FeatureRange { index, min, max } => r
                .features
                .get(index)
                .is_some_and(|&v| v >= min && v <= max),
            Condition::LabelEq { label } => r.label == label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub predicate: Vec<Condition>,
    pub flip_to: usize,
    pub rate: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn matches(&self, r: &TrainingRecord) -> bool {
        self.predicate.iter().all(|c| c.matches(r))
    }
}

/// `round(rate * matches)` with halves rounded up.
pub fn corruption_count(rate: f64, matches: usize) -> usize {
    (rate * matches as f64 + 0.5).floor() as usize
}

/// Flips the labels of a seeded uniform sample of the records matching the
/// predicate. Returns the new set and the sorted corrupted ids.
pub fn inject_corruption(
    ts: &TrainingSet,
    spec: &CorruptionSpec,
) -> Result<(TrainingSet, Vec<i64>), DataError> {
    if spec.flip_to >= ts.classes {
        return Err(DataError::InvalidCorruption(format!(
            "flip_to {} outside [0, {})",
            spec.flip_to, ts.classes
        )));
    }
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(DataError::InvalidCorruption(format!(
            "rate {} outside [0, 1]",
            spec.rate
        )));
    }
    let matching: Vec<usize> = ts
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| spec.matches(r))
        .map(|(i, _)| i)
        .collect();
    let count = corruption_count(spec.rate, matching.len()).min(matching.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chosen = sample(&mut rng, matching.len(), count);
    let mut out = ts.clone();
    let mut ids = Vec::with_capacity(count);
    for pick in chosen.iter() {
        let rec = &mut out.records[matching[pick]];
        rec.label = spec.flip_to;
        ids.push(rec.id);
    }
    ids.sort_unstable();
    Ok((out, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn training_schema() -> Vec<Column> {
        vec![
            Column::new("id", ColumnKind::Integer),
            Column::new("x0", ColumnKind::Real),
            Column::new("x1", ColumnKind::Real),
            Column::new("y", ColumnKind::Integer),
        ]
    }

    #[test]
    fn loads_training_set() {
        let f = write_tmp("id,x0,x1,y\n1,0.5,1.0,0\n2,-1,2,1\n3,3.25,0,1\n");
        let t = load_csv(f.path(), &training_schema(), "id", Some("y")).unwrap();
        let Table::Training(ts) = t else {
            panic!("expected training set")
        };
        assert_eq!(ts.len(), 3);
        assert_eq!(ts.dim, 2);
        assert_eq!(ts.classes, 2);
        assert_eq!(ts.records[1].features, vec![-1.0, 2.0]);
        assert_eq!(ts.feature_names, vec!["x0", "x1"]);
    }

    #[test]
    fn header_mismatch_is_reported() {
        let f = write_tmp("id,x0,y\n1,0.5,0\n");
        let err = load_csv(f.path(), &training_schema(), "id", Some("y")).unwrap_err();
        assert!(matches!(err, DataError::HeaderMismatch { .. }));
    }

    #[test]
    fn empty_data_section_gives_empty_relation() {
        let f = write_tmp("id,name\n");
        let schema = vec![
            Column::new("id", ColumnKind::Integer),
            Column::new("name", ColumnKind::Text),
        ];
        let Table::Relation(rel) = load_csv(f.path(), &schema, "id", None).unwrap() else {
            panic!("expected relation")
        };
        assert!(rel.is_empty());
    }

    #[test]
    fn bad_cell_reports_line() {
        let f = write_tmp("id,x0,x1,y\n1,0.5,1.0,0\n2,abc,2,1\n");
        let err = load_csv(f.path(), &training_schema(), "id", Some("y")).unwrap_err();
        match err {
            DataError::BadCell { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "x0");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_file() {
        let err = load_csv(
            Path::new("/nonexistent/file.csv"),
            &training_schema(),
            "id",
            None,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::MissingFile(_)));
    }

    fn digits() -> TrainingSet {
        let records = (0..40)
            .map(|i| TrainingRecord {
                id: i,
                features: vec![i as f64, (i % 3) as f64],
                label: (i % 10) as usize,
            })
            .collect();
        TrainingSet::new(records, 2, 10).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let ts = digits();
        let spec = CorruptionSpec {
            predicate: vec![Condition::LabelEq { label: 1 }],
            flip_to: 7,
            rate: 0.0,
            seed: 3,
        };
        let (out, ids) = inject_corruption(&ts, &spec).unwrap();
        assert_eq!(out, ts);
        assert!(ids.is_empty());
    }

    #[test]
    fn full_rate_flips_every_match() {
        let ts = digits();
        let spec = CorruptionSpec {
            predicate: vec![Condition::LabelEq { label: 1 }],
            flip_to: 7,
            rate: 1.0,
            seed: 3,
        };
        let (out, ids) = inject_corruption(&ts, &spec).unwrap();
        assert_eq!(ids, vec![1, 11, 21, 31]);
        assert!(out.records.iter().all(|r| r.label != 1));
        for id in ids {
            assert_eq!(out.records[id as usize].label, 7);
        }
    }

    #[test]
    fn same_seed_same_choice() {
        let ts = digits();
        let spec = CorruptionSpec {
            predicate: vec![Condition::FeatureRange {
                index: 0,
                min: 5.0,
                max: 30.0,
            }],
            flip_to: 0,
            rate: 0.5,
            seed: 11,
        };
        let a = inject_corruption(&ts, &spec).unwrap();
        let b = inject_corruption(&ts, &spec).unwrap();
        assert_eq!(a, b);
        // 26 matches, half rounds to 13
        assert_eq!(a.1.len(), 13);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(corruption_count(0.5, 5), 3);
        assert_eq!(corruption_count(0.3, 10), 3);
        assert_eq!(corruption_count(0.25, 2), 1);
        assert_eq!(corruption_count(0.0, 7), 0);
    }

    #[test]
    fn rejects_bad_flip_target() {
        let ts = digits();
        let spec = CorruptionSpec {
            predicate: vec![],
            flip_to: 10,
            rate: 0.5,
            seed: 0,
        };
        assert!(inject_corruption(&ts, &spec).is_err());
    }

    #[test]
    fn numeric_values_compare_across_kinds() {
        assert_eq!(Value::Int(2), Value::Real(2.0));
        assert!(Value::Int(1) < Value::Real(1.5));
        assert!(Value::Text("a".into()) > Value::Int(9));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn corruption_changes_only_labels(rate in 0.0f64..=1.0, seed in 0u64..1000, lo in 0.0f64..20.0) {
                let ts = digits();
                let spec = CorruptionSpec {
                    predicate: vec![Condition::FeatureRange { index: 0, min: lo, max: 40.0 }],
                    flip_to: 9,
                    rate,
                    seed,
                };
                let matches = ts.records.iter().filter(|r| spec.matches(r)).count();
                let (out, ids) = inject_corruption(&ts, &spec).unwrap();
                prop_assert_eq!(ids.len(), corruption_count(rate, matches));
                let corrupted: HashSet<i64> = ids.iter().copied().collect();
                for (a, b) in ts.records.iter().zip(&out.records) {
                    prop_assert_eq!(a.id, b.id);
                    prop_assert_eq!(&a.features, &b.features);
                    if corrupted.contains(&a.id) {
                        prop_assert!(spec.matches(a));
                        prop_assert_eq!(b.label, 9);
                    } else {
                        prop_assert_eq!(a.label, b.label);
                    }
                }
            }
        }
    }
}
