//! User complaints about query outputs and their resolution against the
//! current results.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provenance::{AggNode, ExecError, ProvEntry, ProvenanceMap, ResultSet, RowKey, TupleKey, ViewSet};
use crate::query::CmpOp;

/// Slack when comparing a concrete value against a complaint target.
pub const SATISFACTION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ComplaintError {
    #[error("complaint refers to unknown query {0}")]
    UnknownQuery(String),
    #[error("complaint target {0} not found")]
    UnknownTarget(String),
    #[error("attribute {attr} not in the output of query {query}")]
    UnknownAttribute { query: String, attr: String },
    #[error("complaint on {0} must name an attribute")]
    AmbiguousAttribute(String),
    #[error("malformed complaint: {0}")]
    Malformed(String),
    #[error("unsupported complaint: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("reading complaints: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing complaints: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplaintKind {
    Value,
    Tuple,
    Prediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComplaintOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">=")]
    Ge,
}

impl ComplaintOp {
    pub fn as_cmp(self) -> CmpOp {
        match self {
            ComplaintOp::Eq => CmpOp::Eq,
            ComplaintOp::Le => CmpOp::Le,
            ComplaintOp::Ge => CmpOp::Ge,
        }
    }

    pub fn holds(self, value: f64, target: f64) -> bool {
        match self {
            ComplaintOp::Eq => (value - target).abs() <= SATISFACTION_TOL * target.abs().max(1.0),
            ComplaintOp::Le => value <= target + SATISFACTION_TOL * target.abs().max(1.0),
            ComplaintOp::Ge => value >= target - SATISFACTION_TOL * target.abs().max(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Output(TupleKey),
    Row {
        row_id: i64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        relation: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Complaint {
    pub query: String,
    pub kind: ComplaintKind,
    pub target: Target,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<ComplaintOp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl Complaint {
    /// `query.attr of the global aggregate op value`.
    pub fn value(query: &str, key: TupleKey, attr: &str, op: ComplaintOp, value: f64) -> Self {
        Self {
            query: query.into(),
            kind: ComplaintKind::Value,
            target: Target::Output(key),
            attr: Some(attr.into()),
            op: Some(op),
            value: Some(value),
        }
    }

    pub fn tuple(query: &str, key: TupleKey) -> Self {
        Self {
            query: query.into(),
            kind: ComplaintKind::Tuple,
            target: Target::Output(key),
            attr: None,
            op: None,
            value: None,
        }
    }

    pub fn prediction(query: &str, row: &RowKey, class: usize) -> Self {
        Self {
            query: query.into(),
            kind: ComplaintKind::Prediction,
            target: Target::Row {
                row_id: row.row_id,
                relation: Some(row.relation.to_string()),
            },
            attr: None,
            op: None,
            value: Some(class as f64),
        }
    }

    /// Checks that the fields match the kind.
    pub fn check(&self) -> Result<(), ComplaintError> {
        let bad = |m: &str| Err(ComplaintError::Malformed(format!("{m} in {self:?}")));
        match self.kind {
            ComplaintKind::Value => {
                if !matches!(self.target, Target::Output(_)) {
                    return bad("value complaint needs a tuple_key or group_key target");
                }
                if self.op.is_none() || self.value.is_none() {
                    return bad("value complaint needs op and value");
                }
            }
            ComplaintKind::Tuple => {
                if !matches!(self.target, Target::Output(_)) {
                    return bad("tuple complaint needs a tuple_key or group_key target");
                }
                if self.op.is_some() || self.value.is_some() {
                    return bad("tuple complaint takes no op or value");
                }
            }
            ComplaintKind::Prediction => {
                if !matches!(self.target, Target::Row { .. }) {
                    return bad("prediction complaint needs a row_id target");
                }
                match self.value {
                    Some(v) if v >= 0.0 && v.fract() == 0.0 => {}
                    _ => return bad("prediction complaint needs a class label value"),
                }
            }
        }
        Ok(())
    }

    pub fn class(&self) -> Option<usize> {
        self.value.map(|v| v as usize)
    }
}

pub fn parse_complaints(json: &str) -> Result<Vec<Complaint>, ComplaintError> {
    let cs: Vec<Complaint> = serde_json::from_str(json)?;
    for c in &cs {
        c.check()?;
    }
    Ok(cs)
}

pub fn load_complaints(path: &Path) -> Result<Vec<Complaint>, ComplaintError> {
    parse_complaints(&std::fs::read_to_string(path)?)
}

/// Concrete and symbolic state of one query at the current model.
#[derive(Debug, Clone)]
pub struct QueryState {
    pub result: ResultSet,
    pub prov: ProvenanceMap,
    /// Relation used for prediction complaints that omit one.
    pub default_relation: Option<String>,
}

/// Everything complaints are resolved against.
#[derive(Debug, Clone, Default)]
pub struct DebugContext {
    pub queries: BTreeMap<String, QueryState>,
    pub views: ViewSet,
}

/// A complaint resolved to the output cell or prediction it constrains.
#[derive(Debug, Clone)]
pub enum Resolved<'a> {
    /// `cell` is `None` when the value does not depend on predictions.
    Value {
        entry: &'a ProvEntry,
        cell: Option<&'a AggNode>,
        concrete: f64,
        op: ComplaintOp,
        target: f64,
    },
    /// The tuple is currently in the result.
    Tuple { entry: &'a ProvEntry },
    /// The tuple is already gone.
    Absent,
    Prediction { row: RowKey, class: usize, current: usize },
}

impl DebugContext {
    pub fn query(&self, id: &str) -> Result<&QueryState, ComplaintError> {
        self.queries
            .get(id)
            .ok_or_else(|| ComplaintError::UnknownQuery(id.to_string()))
    }

    pub fn resolve<'a>(&'a self, c: &Complaint) -> Result<Resolved<'a>, ComplaintError> {
        c.check()?;
        let q = self.query(&c.query)?;
        match (&c.kind, &c.target) {
            (ComplaintKind::Value, Target::Output(key)) => {
                let entry = q
                    .prov
                    .find(key)
                    .ok_or_else(|| ComplaintError::UnknownTarget(key.to_string()))?;
                let col = match &c.attr {
                    Some(a) => q.result.column_index(a).ok_or_else(|| {
                        ComplaintError::UnknownAttribute {
                            query: c.query.clone(),
                            attr: a.clone(),
                        }
                    })?,
                    None => {
                        let symbolic: Vec<usize> = entry
                            .cells
                            .iter()
                            .enumerate()
                            .filter_map(|(i, x)| x.as_ref().map(|_| i))
                            .collect();
                        match (q.result.columns.len(), symbolic.as_slice()) {
                            (1, _) => 0,
                            (_, [one]) => *one,
                            _ => return Err(ComplaintError::AmbiguousAttribute(key.to_string())),
                        }
                    }
                };
                let cell = entry.cells.get(col).and_then(Option::as_ref);
                let concrete = match q.result.find(key) {
                    Some(t) => t.values[col].as_f64().ok_or_else(|| {
                        ComplaintError::Unsupported(format!("non-numeric value at {key}"))
                    })?,
                    None => match cell {
                        Some(node) => node.eval_views(&self.views)?,
                        None => {
                            return Err(ComplaintError::UnknownTarget(key.to_string()))
                        }
                    },
                };
                Ok(Resolved::Value {
                    entry,
                    cell,
                    concrete,
                    op: c.op.unwrap(),
                    target: c.value.unwrap(),
                })
            }
            (ComplaintKind::Tuple, Target::Output(key)) => {
                if matches!(key, TupleKey::Group(_)) {
                    return Err(ComplaintError::Unsupported(
                        "tuple complaints on aggregate groups; complain about the group's count instead".into(),
                    ));
                }
                if q.result.find(key).is_none() {
                    return Ok(Resolved::Absent);
                }
                let entry = q
                    .prov
                    .find(key)
                    .ok_or_else(|| ComplaintError::UnknownTarget(key.to_string()))?;
                Ok(Resolved::Tuple { entry })
            }
            (ComplaintKind::Prediction, Target::Row { row_id, relation }) => {
                let rel = relation
                    .clone()
                    .or_else(|| q.default_relation.clone())
                    .ok_or_else(|| {
                        ComplaintError::Malformed(format!(
                            "prediction complaint on row {row_id} needs a relation"
                        ))
                    })?;
                let row = RowKey::new(&rel, *row_id);
                let view_row = self
                    .views
                    .row(&row)
                    .map_err(|_| ComplaintError::UnknownTarget(row.to_string()))?;
                let class = c.class().unwrap();
                if class >= view_row.probs.len() {
                    return Err(ComplaintError::Malformed(format!(
                        "class {class} out of range"
                    )));
                }
                Ok(Resolved::Prediction {
                    current: view_row.predicted,
                    row,
                    class,
                })
            }
            _ => unreachable!("checked above"),
        }
    }

    /// Whether the concrete outputs already meet the complaint.
    pub fn is_satisfied(&self, c: &Complaint) -> Result<bool, ComplaintError> {
        Ok(match self.resolve(c)? {
            Resolved::Value {
                concrete, op, target, ..
            } => op.holds(concrete, target),
            Resolved::Tuple { .. } => false,
            Resolved::Absent => true,
            Resolved::Prediction { class, current, .. } => class == current,
        })
    }

    pub fn all_satisfied(&self, cs: &[Complaint]) -> Result<bool, ComplaintError> {
        for c in cs {
            if !self.is_satisfied(c)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
