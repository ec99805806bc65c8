//! Prediction views, concrete query execution, and debug-mode execution that
//! records for every output how it depends on individual predictions.
//!
//! In debug mode each joined row combination is evaluated under every class
//! assignment of the rows it predicts on. Everything that does not depend on
//! a prediction therefore folds to a constant, and the satisfying assignments
//! are factored back into a compact boolean formula over prediction atoms.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{argmax, predict_proba, ModelError, ModelState};
use crate::query::{
    AggKind, ArithOp, Catalog, CheckedPlan, CmpOp, Expr, Literal, Predicate, RelationSchema,
    SelectItem,
};
use crate::tabular::{DataError, Relation, Row, Value};

/// Default bound on the number of class assignments enumerated for one row
/// combination or one threshold predicate.
pub const DEFAULT_ENUMERATION_CAP: usize = 10_000;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("no prediction view for relation {0}")]
    MissingView(String),
    #[error("no relation named {0} in the database")]
    MissingRelation(String),
    #[error("view for {relation} has no row {row_id}")]
    MissingViewRow { relation: String, row_id: i64 },
    #[error("feature arity mismatch: model expects {expected}, got {found}")]
    Arity { expected: usize, found: usize },
    #[error("enumeration needs {needed} class assignments, cap is {cap}")]
    EnumerationCap { needed: f64, cap: usize },
    #[error("unsupported in debug mode: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

/// Identifies one queried row; the prediction atoms of a row are shared by
/// every alias that ranges over its relation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub relation: Arc<str>,
    pub row_id: i64,
}

impl RowKey {
    pub fn new(relation: &str, row_id: i64) -> Self {
        Self {
            relation: Arc::from(relation),
            row_id,
        }
    }
}

impl fmt::Display for RowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.relation, self.row_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewRow {
    pub row_id: i64,
    pub predicted: usize,
    pub probs: Vec<f64>,
    pub features: Vec<f64>,
}

/// Materialised model output for one relation.
#[derive(Debug, Clone, Serialize)]
pub struct PredictionView {
    pub model_version: u64,
    pub relation: String,
    pub feature_columns: Vec<String>,
    pub rows: Vec<ViewRow>,
    #[serde(skip)]
    index: HashMap<i64, usize>,
}

impl PredictionView {
    pub fn from_rows(
        model_version: u64,
        relation: impl Into<String>,
        feature_columns: Vec<String>,
        rows: Vec<ViewRow>,
    ) -> Self {
        let index = rows.iter().enumerate().map(|(i, r)| (r.row_id, i)).collect();
        Self {
            model_version,
            relation: relation.into(),
            feature_columns,
            rows,
            index,
        }
    }

    pub fn get(&self, row_id: i64) -> Option<&ViewRow> {
        self.index.get(&row_id).map(|&i| &self.rows[i])
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn build_prediction_view(
    model: &ModelState,
    rel: &Relation,
    feature_columns: &[String],
    model_version: u64,
) -> Result<PredictionView, ExecError> {
    if feature_columns.len() != model.dim {
        return Err(ExecError::Arity {
            expected: model.dim,
            found: feature_columns.len(),
        });
    }
    let xs = rel.feature_matrix(feature_columns)?;
    let rows = rel
        .rows
        .par_iter()
        .zip(xs.into_par_iter())
        .map(|(row, x)| {
            let probs = predict_proba(model, &x)?;
            Ok(ViewRow {
                row_id: row.id,
                predicted: argmax(&probs),
                probs,
                features: x,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(PredictionView::from_rows(
        model_version,
        rel.name.clone(),
        feature_columns.to_vec(),
        rows,
    ))
}

/// Prediction views keyed by relation name.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ViewSet {
    pub views: BTreeMap<String, PredictionView>,
}

impl ViewSet {
    pub fn insert(&mut self, view: PredictionView) {
        self.views.insert(view.relation.clone(), view);
    }

    pub fn get(&self, relation: &str) -> Option<&PredictionView> {
        self.views.get(relation)
    }

    pub fn row(&self, key: &RowKey) -> Result<&ViewRow, ExecError> {
        let view = self
            .get(&key.relation)
            .ok_or_else(|| ExecError::MissingView(key.relation.to_string()))?;
        view.get(key.row_id).ok_or_else(|| ExecError::MissingViewRow {
            relation: key.relation.to_string(),
            row_id: key.row_id,
        })
    }

    pub fn predicted(&self, key: &RowKey) -> Result<usize, ExecError> {
        self.row(key).map(|r| r.predicted)
    }

    /// Copy with some predicted classes replaced; probabilities are kept.
    pub fn with_assignment(&self, assignment: &BTreeMap<RowKey, usize>) -> ViewSet {
        let mut out = self.clone();
        for (key, &class) in assignment {
            if let Some(view) = out.views.get_mut(&*key.relation) {
                if let Some(&i) = view.index.get(&key.row_id) {
                    view.rows[i].predicted = class;
                }
            }
        }
        out
    }
}

/// The queried relations.
#[derive(Debug, Clone, Default)]
pub struct Database {
    pub relations: BTreeMap<String, Relation>,
}

impl Database {
    pub fn new(relations: impl IntoIterator<Item = Relation>) -> Self {
        Self {
            relations: relations.into_iter().map(|r| (r.name.clone(), r)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Relation> {
        self.relations.get(name)
    }

    /// Catalog in which every relation feeds `feature_columns` to the model,
    /// unless overridden per relation.
    pub fn catalog(
        &self,
        feature_columns: &[String],
        overrides: &BTreeMap<String, Vec<String>>,
    ) -> Catalog {
        Catalog {
            relations: self
                .relations
                .values()
                .map(|r| {
                    let cols = overrides
                        .get(&r.name)
                        .cloned()
                        .unwrap_or_else(|| feature_columns.to_vec());
                    RelationSchema::of(r, cols)
                })
                .collect(),
        }
    }
}

/// Builds a view for every relation the plan predicts on.
pub fn build_views(
    model: &ModelState,
    db: &Database,
    plans: &[&CheckedPlan],
    model_version: u64,
) -> Result<ViewSet, ExecError> {
    let mut views = ViewSet::default();
    for plan in plans {
        for (relation, cols) in plan.predicted_relations() {
            if views.get(&relation).is_some() {
                continue;
            }
            let rel = db
                .get(&relation)
                .ok_or_else(|| ExecError::MissingRelation(relation.clone()))?;
            views.insert(build_prediction_view(model, rel, &cols, model_version)?);
        }
    }
    Ok(views)
}

// ---------------------------------------------------------------------------
// Results

/// Identity of an output tuple: the source row ids for projections, the
/// group values for aggregates (empty for a global aggregate).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TupleKey {
    #[serde(rename = "tuple_key")]
    Rows(Vec<i64>),
    #[serde(rename = "group_key")]
    Group(Vec<Value>),
}

impl fmt::Display for TupleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (tag, parts): (&str, Vec<String>) = match self {
            TupleKey::Rows(ids) => ("rows", ids.iter().map(ToString::to_string).collect()),
            TupleKey::Group(vals) => ("group", vals.iter().map(ToString::to_string).collect()),
        };
        write!(f, "{tag}({})", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTuple {
    pub key: TupleKey,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultSet {
    pub columns: Vec<String>,
    pub tuples: Vec<ResultTuple>,
}

impl ResultSet {
    pub fn find(&self, key: &TupleKey) -> Option<&ResultTuple> {
        self.tuples.iter().find(|t| &t.key == key)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ExecError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for t in &self.tuples {
            w.write_record(t.values.iter().map(ToString::to_string))?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Provenance

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum ProvPolynomial {
    Const { value: bool },
    Atom { row: RowKey, class: usize },
    And { children: Vec<ProvPolynomial> },
    Or { children: Vec<ProvPolynomial> },
    Not { child: Box<ProvPolynomial> },
}

pub const TRUE: ProvPolynomial = ProvPolynomial::Const { value: true };
pub const FALSE: ProvPolynomial = ProvPolynomial::Const { value: false };

impl ProvPolynomial {
    pub fn atom(row: RowKey, class: usize) -> Self {
        ProvPolynomial::Atom { row, class }
    }

    pub fn constant(value: bool) -> Self {
        ProvPolynomial::Const { value }
    }

    pub fn as_const(&self) -> Option<bool> {
        match self {
            ProvPolynomial::Const { value } => Some(*value),
            _ => None,
        }
    }

    /// Conjunction with constant folding and flattening. Two atoms of the
    /// same row with different classes make the conjunction false.
    pub fn and(children: Vec<ProvPolynomial>) -> Self {
        let mut flat: Vec<ProvPolynomial> = Vec::with_capacity(children.len());
        let mut stack: Vec<ProvPolynomial> = children.into_iter().rev().collect();
        while let Some(c) = stack.pop() {
            match c {
                ProvPolynomial::Const { value: true } => {}
                ProvPolynomial::Const { value: false } => return FALSE,
                ProvPolynomial::And { children } => stack.extend(children.into_iter().rev()),
                other => {
                    if !flat.contains(&other) {
                        flat.push(other);
                    }
                }
            }
        }
        let mut fixed: HashMap<&RowKey, usize> = HashMap::new();
        for c in &flat {
            if let ProvPolynomial::Atom { row, class } = c {
                if let Some(prev) = fixed.insert(row, *class) {
                    if prev != *class {
                        return FALSE;
                    }
                }
            }
        }
        match flat.len() {
            0 => TRUE,
            1 => flat.pop().unwrap(),
            _ => ProvPolynomial::And { children: flat },
        }
    }

    pub fn or(children: Vec<ProvPolynomial>) -> Self {
        let mut flat: Vec<ProvPolynomial> = Vec::with_capacity(children.len());
        let mut stack: Vec<ProvPolynomial> = children.into_iter().rev().collect();
        while let Some(c) = stack.pop() {
            match c {
                ProvPolynomial::Const { value: false } => {}
                ProvPolynomial::Const { value: true } => return TRUE,
                ProvPolynomial::Or { children } => stack.extend(children.into_iter().rev()),
                other => {
                    if !flat.contains(&other) {
                        flat.push(other);
                    }
                }
            }
        }
        match flat.len() {
            0 => FALSE,
            1 => flat.pop().unwrap(),
            _ => ProvPolynomial::Or { children: flat },
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(child: ProvPolynomial) -> Self {
        match child {
            ProvPolynomial::Const { value } => ProvPolynomial::Const { value: !value },
            ProvPolynomial::Not { child } => *child,
            other => ProvPolynomial::Not {
                child: Box::new(other),
            },
        }
    }

    /// Boolean value when every row takes the class given by `class_of`.
    pub fn eval<F: Fn(&RowKey) -> usize>(&self, class_of: &F) -> bool {
        match self {
            ProvPolynomial::Const { value } => *value,
            ProvPolynomial::Atom { row, class } => class_of(row) == *class,
            ProvPolynomial::And { children } => children.iter().all(|c| c.eval(class_of)),
            ProvPolynomial::Or { children } => children.iter().any(|c| c.eval(class_of)),
            ProvPolynomial::Not { child } => !child.eval(class_of),
        }
    }

    pub fn eval_views(&self, views: &ViewSet) -> Result<bool, ExecError> {
        for row in self.rows() {
            views.predicted(&row)?;
        }
        Ok(self.eval(&|k: &RowKey| views.predicted(k).unwrap()))
    }

    fn collect_atoms<'a>(&'a self, out: &mut Vec<(&'a RowKey, usize)>) {
        match self {
            ProvPolynomial::Const { .. } => {}
            ProvPolynomial::Atom { row, class } => out.push((row, *class)),
            ProvPolynomial::And { children } | ProvPolynomial::Or { children } => {
                children.iter().for_each(|c| c.collect_atoms(out))
            }
            ProvPolynomial::Not { child } => child.collect_atoms(out),
        }
    }

    /// Distinct atoms as (row, class).
    pub fn atoms(&self) -> BTreeSet<(RowKey, usize)> {
        let mut v = Vec::new();
        self.collect_atoms(&mut v);
        v.into_iter().map(|(r, c)| (r.clone(), c)).collect()
    }

    pub fn rows(&self) -> BTreeSet<RowKey> {
        let mut v = Vec::new();
        self.collect_atoms(&mut v);
        v.into_iter().map(|(r, _)| r.clone()).collect()
    }

    /// True when no atom occurs twice.
    pub fn is_read_once(&self) -> bool {
        let mut v = Vec::new();
        self.collect_atoms(&mut v);
        let n = v.len();
        v.sort();
        v.dedup();
        v.len() == n
    }
}

impl fmt::Display for ProvPolynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |f: &mut fmt::Formatter<'_>, cs: &[ProvPolynomial], sep: &str| {
            f.write_str("(")?;
            for (i, c) in cs.iter().enumerate() {
                if i > 0 {
                    f.write_str(sep)?;
                }
                write!(f, "{c}")?;
            }
            f.write_str(")")
        };
        match self {
            ProvPolynomial::Const { value } => write!(f, "{value}"),
            ProvPolynomial::Atom { row, class } => write!(f, "[{row}={class}]"),
            ProvPolynomial::And { children } => join(f, children, " & "),
            ProvPolynomial::Or { children } => join(f, children, " | "),
            ProvPolynomial::Not { child } => write!(f, "!{child}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggTerm {
    pub coef: f64,
    pub poly: ProvPolynomial,
}

/// An aggregate output as `Σ coef · [poly]`, divided by `denominator` when
/// present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggNode {
    pub kind: AggKind,
    pub terms: Vec<AggTerm>,
    pub denominator: Option<f64>,
}

impl AggNode {
    pub fn eval<F: Fn(&RowKey) -> usize>(&self, class_of: &F) -> f64 {
        let s: f64 = self
            .terms
            .iter()
            .filter(|t| t.poly.eval(class_of))
            .map(|t| t.coef)
            .sum();
        self.denominator.map_or(s, |d| s / d)
    }

    pub fn eval_views(&self, views: &ViewSet) -> Result<f64, ExecError> {
        for row in self.rows() {
            views.predicted(&row)?;
        }
        Ok(self.eval(&|k: &RowKey| views.predicted(k).unwrap()))
    }

    pub fn rows(&self) -> BTreeSet<RowKey> {
        self.terms.iter().flat_map(|t| t.poly.rows()).collect()
    }
}

/// Provenance of one output tuple, present or merely possible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvEntry {
    pub key: TupleKey,
    /// Whether the tuple is in the concrete result.
    pub present: bool,
    pub existence: ProvPolynomial,
    /// Per output column; `None` when the column does not depend on
    /// predictions.
    pub cells: Vec<Option<AggNode>>,
}

/// Provenance for every output tuple, in result order, followed by groups
/// that the current predictions leave empty but other predictions could
/// populate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProvenanceMap {
    pub columns: Vec<String>,
    pub entries: Vec<ProvEntry>,
}

impl ProvenanceMap {
    pub fn find(&self, key: &TupleKey) -> Option<&ProvEntry> {
        self.entries.iter().find(|e| &e.key == key)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

/// Factors a set of satisfying class assignments into a formula.
///
/// `sat` is indexed in mixed radix with `keys[0]` most significant. Classes
/// of one row that share an identical remaining formula are merged into a
/// disjunction of that row's atoms.
pub fn factor_assignments(keys: &[RowKey], classes: usize, sat: &[bool]) -> ProvPolynomial {
    debug_assert_eq!(sat.len(), classes.pow(keys.len() as u32));
    if sat.iter().all(|&b| b) {
        return TRUE;
    }
    if !sat.iter().any(|&b| b) {
        return FALSE;
    }
    let stride = sat.len() / classes;
    let key = &keys[0];
    let mut groups: Vec<(ProvPolynomial, Vec<usize>)> = Vec::new();
    for v in 0..classes {
        let sub = factor_assignments(&keys[1..], classes, &sat[v * stride..(v + 1) * stride]);
        if sub == FALSE {
            continue;
        }
        match groups.iter_mut().find(|(p, _)| *p == sub) {
            Some((_, vals)) => vals.push(v),
            None => groups.push((sub, vec![v])),
        }
    }
    let terms = groups
        .into_iter()
        .map(|(sub, vals)| {
            if vals.len() == classes {
                return sub;
            }
            let lit = ProvPolynomial::or(
                vals.into_iter()
                    .map(|v| ProvPolynomial::atom(key.clone(), v))
                    .collect(),
            );
            ProvPolynomial::and(vec![lit, sub])
        })
        .collect();
    ProvPolynomial::or(terms)
}

fn check_cap(classes: usize, keys: usize, cap: usize) -> Result<usize, ExecError> {
    let needed = (classes as f64).powi(keys as i32);
    if needed > cap as f64 {
        return Err(ExecError::EnumerationCap { needed, cap });
    }
    Ok(needed as usize)
}

/// Decodes assignment number `idx` (mixed radix, first key most significant).
fn decode(mut idx: usize, classes: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = idx % classes;
        idx /= classes;
    }
}

/// Boolean formula over prediction atoms equivalent to `agg cmp constant`.
///
/// Enumerates every class assignment of the rows in `agg` (at most `cap`),
/// ordering rows by decreasing coefficient magnitude so that the most
/// significant positions are factored first.
pub fn compile_threshold_predicate(
    agg: &AggNode,
    cmp: CmpOp,
    constant: f64,
    classes: usize,
    cap: usize,
) -> Result<ProvPolynomial, ExecError> {
    let mut weight: BTreeMap<RowKey, f64> = BTreeMap::new();
    for t in &agg.terms {
        for r in t.poly.rows() {
            let w = weight.entry(r).or_insert(0.0);
            *w = w.max(t.coef.abs());
        }
    }
    let mut keys: Vec<(RowKey, f64)> = weight.into_iter().collect();
    keys.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let keys: Vec<RowKey> = keys.into_iter().map(|(k, _)| k).collect();
    let total = check_cap(classes, keys.len(), cap)?;
    let pos: HashMap<&RowKey, usize> = keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
    let sat: Vec<bool> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let mut a = vec![0; keys.len()];
            decode(idx, classes, &mut a);
            let v = agg.eval(&|k: &RowKey| a[pos[k]]);
            cmp.holds(v.total_cmp(&constant))
        })
        .collect();
    Ok(factor_assignments(&keys, classes, &sat))
}

// ---------------------------------------------------------------------------
// Execution

#[derive(Debug, Clone)]
enum RExpr {
    Col(usize, usize),
    Lit(Value),
    Pred(usize),
    Bin(ArithOp, Box<RExpr>, Box<RExpr>),
    Pow(Box<RExpr>, Box<RExpr>),
}

#[derive(Debug, Clone)]
enum RPred {
    Cmp(RExpr, CmpOp, RExpr),
    And(Box<RPred>, Box<RPred>),
    Or(Box<RPred>, Box<RPred>),
    Not(Box<RPred>),
    Like(RExpr, String),
}

#[derive(Debug, Clone)]
enum RItem {
    Star,
    Count,
    Sum(RExpr),
    Avg(RExpr),
    Expr(RExpr),
}

struct SourceRef<'a> {
    rel: &'a Relation,
    view: Option<&'a PredictionView>,
}

struct Compiled<'a> {
    sources: Vec<SourceRef<'a>>,
    filter: Option<RPred>,
    group: Vec<RExpr>,
    items: Vec<RItem>,
    aggregate: bool,
    columns: Vec<String>,
}

struct Resolver<'p> {
    aliases: Vec<&'p str>,
    rels: Vec<&'p Relation>,
    predicted: Vec<bool>,
}

impl Resolver<'_> {
    fn source(&self, alias: &str) -> Result<usize, ExecError> {
        self.aliases
            .iter()
            .position(|a| *a == alias)
            .ok_or_else(|| ExecError::MissingRelation(alias.to_string()))
    }

    fn expr(&mut self, e: &Expr) -> Result<RExpr, ExecError> {
        Ok(match e {
            Expr::Column { qualifier, name } => {
                let s = match qualifier {
                    Some(q) => self.source(q)?,
                    None => 0,
                };
                let c = self.rels[s].column_index(name).ok_or_else(|| {
                    ExecError::Data(DataError::UnknownColumn(name.clone()))
                })?;
                RExpr::Col(s, c)
            }
            Expr::Literal(Literal::Int(v)) => RExpr::Lit(Value::Int(*v)),
            Expr::Literal(Literal::Real(v)) => RExpr::Lit(Value::Real(*v)),
            Expr::Predict(t) => {
                let s = self.source(&t.source)?;
                self.predicted[s] = true;
                RExpr::Pred(s)
            }
            Expr::Binary { op, lhs, rhs } => {
                RExpr::Bin(*op, Box::new(self.expr(lhs)?), Box::new(self.expr(rhs)?))
            }
            Expr::Power { base, exponent } => {
                RExpr::Pow(Box::new(self.expr(base)?), Box::new(self.expr(exponent)?))
            }
        })
    }

    fn pred(&mut self, p: &Predicate) -> Result<RPred, ExecError> {
        Ok(match p {
            Predicate::Compare { lhs, op, rhs } => RPred::Cmp(self.expr(lhs)?, *op, self.expr(rhs)?),
            Predicate::And(a, b) => RPred::And(Box::new(self.pred(a)?), Box::new(self.pred(b)?)),
            Predicate::Or(a, b) => RPred::Or(Box::new(self.pred(a)?), Box::new(self.pred(b)?)),
            Predicate::Not(a) => RPred::Not(Box::new(self.pred(a)?)),
            Predicate::Like { column, pattern } => RPred::Like(self.expr(column)?, pattern.clone()),
        })
    }
}

fn compile<'a>(
    checked: &CheckedPlan,
    db: &'a Database,
    views: &'a ViewSet,
) -> Result<Compiled<'a>, ExecError> {
    let plan = checked.plan();
    let rels = plan
        .sources
        .iter()
        .map(|s| {
            db.get(&s.relation)
                .ok_or_else(|| ExecError::MissingRelation(s.relation.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut r = Resolver {
        aliases: plan.sources.iter().map(|s| s.alias.as_str()).collect(),
        rels: rels.clone(),
        predicted: vec![false; rels.len()],
    };
    let filter = plan.filter.as_ref().map(|p| r.pred(p)).transpose()?;
    let group = plan
        .group_by
        .iter()
        .map(|g| r.expr(g))
        .collect::<Result<Vec<_>, _>>()?;
    let mut columns = Vec::new();
    let mut items = Vec::new();
    for item in &plan.select {
        items.push(match item {
            SelectItem::Star => {
                for (s, rel) in plan.sources.iter().zip(&rels) {
                    for c in &rel.schema {
                        columns.push(if plan.sources.len() == 1 {
                            c.name.clone()
                        } else {
                            format!("{}.{}", s.alias, c.name)
                        });
                    }
                }
                RItem::Star
            }
            SelectItem::CountStar => {
                columns.push(item.to_string());
                RItem::Count
            }
            SelectItem::Sum(e) => {
                columns.push(item.to_string());
                RItem::Sum(r.expr(e)?)
            }
            SelectItem::Avg(e) => {
                columns.push(item.to_string());
                RItem::Avg(r.expr(e)?)
            }
            SelectItem::Expr(e) => {
                columns.push(item.to_string());
                RItem::Expr(r.expr(e)?)
            }
        });
    }
    let sources = plan
        .sources
        .iter()
        .zip(&rels)
        .zip(&r.predicted)
        .map(|((s, rel), &pred)| {
            let view = if pred {
                Some(
                    views
                        .get(&s.relation)
                        .ok_or_else(|| ExecError::MissingView(s.relation.clone()))?,
                )
            } else {
                None
            };
            Ok(SourceRef { rel, view })
        })
        .collect::<Result<Vec<_>, ExecError>>()?;
    Ok(Compiled {
        sources,
        filter,
        group,
        items,
        aggregate: plan.is_aggregate(),
        columns,
    })
}

struct Ctx<'r> {
    rows: &'r [&'r Row],
    classes: &'r [usize],
}

fn arith(op: ArithOp, a: &Value, b: &Value) -> Value {
    if let (Value::Int(x), Value::Int(y)) = (a, b) {
        let r = match op {
            ArithOp::Add => x.checked_add(*y),
            ArithOp::Sub => x.checked_sub(*y),
            ArithOp::Mul => x.checked_mul(*y),
        };
        if let Some(v) = r {
            return Value::Int(v);
        }
    }
    let (x, y) = (a.as_f64().unwrap_or(f64::NAN), b.as_f64().unwrap_or(f64::NAN));
    Value::Real(match op {
        ArithOp::Add => x + y,
        ArithOp::Sub => x - y,
        ArithOp::Mul => x * y,
    })
}

fn power(a: &Value, b: &Value) -> Value {
    if let (Value::Int(x), Value::Int(y)) = (a, b) {
        if let Some(v) = u32::try_from(*y).ok().and_then(|e| x.checked_pow(e)) {
            return Value::Int(v);
        }
    }
    Value::Real(a.as_f64().unwrap_or(f64::NAN).powf(b.as_f64().unwrap_or(f64::NAN)))
}

fn like_match(text: &str, pattern: &str) -> bool {
    let parts: Vec<&str> = pattern.split('%').collect();
    if parts.len() == 1 {
        return text == pattern;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !text.starts_with(first) || text.len() < first.len() + last.len() || !text.ends_with(last) {
        return false;
    }
    let mut rest = &text[first.len()..text.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

fn eval_expr(e: &RExpr, ctx: &Ctx<'_>) -> Value {
    match e {
        RExpr::Col(s, c) => ctx.rows[*s].values[*c].clone(),
        RExpr::Lit(v) => v.clone(),
        RExpr::Pred(s) => Value::Int(ctx.classes[*s] as i64),
        RExpr::Bin(op, a, b) => arith(*op, &eval_expr(a, ctx), &eval_expr(b, ctx)),
        RExpr::Pow(a, b) => power(&eval_expr(a, ctx), &eval_expr(b, ctx)),
    }
}

fn eval_pred(p: &RPred, ctx: &Ctx<'_>) -> bool {
    match p {
        RPred::Cmp(a, op, b) => op.holds(eval_expr(a, ctx).cmp(&eval_expr(b, ctx))),
        RPred::And(a, b) => eval_pred(a, ctx) && eval_pred(b, ctx),
        RPred::Or(a, b) => eval_pred(a, ctx) || eval_pred(b, ctx),
        RPred::Not(a) => !eval_pred(a, ctx),
        RPred::Like(e, pat) => match eval_expr(e, ctx) {
            Value::Text(s) => like_match(&s, pat),
            _ => false,
        },
    }
}

impl Compiled<'_> {
    fn combo_count(&self) -> usize {
        self.sources.iter().map(|s| s.rel.rows.len()).product()
    }

    fn combo_rows(&self, mut idx: usize) -> Vec<&Row> {
        let mut rows = vec![&self.sources[0].rel.rows[0]; self.sources.len()];
        for (s, src) in self.sources.iter().enumerate().rev() {
            let n = src.rel.rows.len();
            rows[s] = &src.rel.rows[idx % n];
            idx /= n;
        }
        rows
    }

    fn hard_classes(&self, rows: &[&Row]) -> Result<Vec<usize>, ExecError> {
        self.sources
            .iter()
            .zip(rows)
            .map(|(src, row)| match src.view {
                None => Ok(0),
                Some(v) => v.get(row.id).map(|r| r.predicted).ok_or_else(|| {
                    ExecError::MissingViewRow {
                        relation: src.rel.name.clone(),
                        row_id: row.id,
                    }
                }),
            })
            .collect()
    }

    fn group_key(&self, ctx: &Ctx<'_>) -> Vec<Value> {
        self.group.iter().map(|g| eval_expr(g, ctx)).collect()
    }
}

#[derive(Debug, Clone, Default)]
struct Acc {
    count: i64,
    int_sum: Option<i64>,
    real_sum: f64,
}

impl Acc {
    fn new() -> Self {
        Self {
            count: 0,
            int_sum: Some(0),
            real_sum: 0.0,
        }
    }

    fn add(&mut self, v: &Value) {
        self.count += 1;
        self.real_sum += v.as_f64().unwrap_or(f64::NAN);
        self.int_sum = match (self.int_sum, v) {
            (Some(s), Value::Int(x)) => s.checked_add(*x),
            _ => None,
        };
    }

    fn sum(&self) -> Value {
        self.int_sum.map_or(Value::Real(self.real_sum), Value::Int)
    }
}

/// Concrete execution at the views' predicted classes.
pub fn execute(plan: &CheckedPlan, db: &Database, views: &ViewSet) -> Result<ResultSet, ExecError> {
    let c = compile(plan, db, views)?;
    let mut out = ResultSet {
        columns: c.columns.clone(),
        tuples: Vec::new(),
    };
    if c.sources.iter().any(|s| s.rel.rows.is_empty()) && !c.aggregate {
        return Ok(out);
    }
    let total = if c.sources.iter().any(|s| s.rel.rows.is_empty()) {
        0
    } else {
        c.combo_count()
    };
    let mut groups: BTreeMap<Vec<Value>, (Vec<Value>, Vec<Acc>)> = BTreeMap::new();
    for idx in 0..total {
        let rows = c.combo_rows(idx);
        let classes = c.hard_classes(&rows)?;
        let ctx = Ctx {
            rows: &rows,
            classes: &classes,
        };
        if let Some(f) = &c.filter {
            if !eval_pred(f, &ctx) {
                continue;
            }
        }
        if !c.aggregate {
            let mut values = Vec::new();
            for item in &c.items {
                match item {
                    RItem::Star => {
                        for r in &rows {
                            values.extend(r.values.iter().cloned());
                        }
                    }
                    RItem::Expr(e) => values.push(eval_expr(e, &ctx)),
                    _ => unreachable!("aggregate item in projection"),
                }
            }
            out.tuples.push(ResultTuple {
                key: TupleKey::Rows(rows.iter().map(|r| r.id).collect()),
                values,
            });
            continue;
        }
        let key = c.group_key(&ctx);
        let (_, accs) = groups.entry(key).or_insert_with(|| {
            let exprs = c
                .items
                .iter()
                .map(|item| match item {
                    RItem::Expr(e) => eval_expr(e, &ctx),
                    _ => Value::Int(0),
                })
                .collect();
            (exprs, vec![Acc::new(); c.items.len()])
        });
        for (item, acc) in c.items.iter().zip(accs.iter_mut()) {
            match item {
                RItem::Count => acc.add(&Value::Int(1)),
                RItem::Sum(e) | RItem::Avg(e) => acc.add(&eval_expr(e, &ctx)),
                _ => {}
            }
        }
    }
    if c.aggregate {
        let has_avg = c.items.iter().any(|i| matches!(i, RItem::Avg(_)));
        if c.group.is_empty() && groups.is_empty() && !has_avg {
            groups.insert(Vec::new(), (vec![Value::Int(0); c.items.len()], vec![Acc::new(); c.items.len()]));
        }
        for (key, (exprs, accs)) in groups {
            let values = c
                .items
                .iter()
                .zip(exprs)
                .zip(&accs)
                .map(|((item, e), acc)| match item {
                    RItem::Count => Value::Int(acc.count),
                    RItem::Sum(_) => acc.sum(),
                    RItem::Avg(_) => Value::Real(acc.real_sum / acc.count as f64),
                    _ => e,
                })
                .collect();
            out.tuples.push(ResultTuple {
                key: TupleKey::Group(key),
                values,
            });
        }
    }
    Ok(out)
}

/// What one row combination contributes under every class assignment.
struct ComboProv {
    keys: Vec<RowKey>,
    /// Per group key: which assignments put the combination in that group
    /// (or, for projections, make it an output tuple).
    groups: Vec<(Vec<Value>, GroupSat)>,
    ids: Vec<i64>,
}

struct GroupSat {
    member: Vec<bool>,
    /// Per select item: assignments grouped by the item's value.
    values: Vec<Vec<(Value, Vec<bool>)>>,
}

fn combo_provenance(
    c: &Compiled<'_>,
    idx: usize,
    classes: usize,
    cap: usize,
) -> Result<ComboProv, ExecError> {
    let rows = c.combo_rows(idx);
    let mut keys: Vec<RowKey> = Vec::new();
    let mut slot = vec![usize::MAX; rows.len()];
    for (s, (src, row)) in c.sources.iter().zip(&rows).enumerate() {
        if src.view.is_some() {
            let k = RowKey::new(&src.rel.name, row.id);
            slot[s] = match keys.iter().position(|x| *x == k) {
                Some(p) => p,
                None => {
                    keys.push(k);
                    keys.len() - 1
                }
            };
        }
    }
    let total = check_cap(classes, keys.len(), cap)?;
    let mut a = vec![0; keys.len()];
    let mut cls = vec![0; rows.len()];
    let mut groups: Vec<(Vec<Value>, GroupSat)> = Vec::new();
    for n in 0..total {
        decode(n, classes, &mut a);
        for (s, &p) in slot.iter().enumerate() {
            cls[s] = if p == usize::MAX { 0 } else { a[p] };
        }
        let ctx = Ctx {
            rows: &rows,
            classes: &cls,
        };
        if let Some(f) = &c.filter {
            if !eval_pred(f, &ctx) {
                continue;
            }
        }
        let key = if c.aggregate { c.group_key(&ctx) } else { Vec::new() };
        let gi = match groups.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                groups.push((
                    key,
                    GroupSat {
                        member: vec![false; total],
                        values: vec![Vec::new(); c.items.len()],
                    },
                ));
                groups.len() - 1
            }
        };
        let g = &mut groups[gi].1;
        g.member[n] = true;
        for (item, vals) in c.items.iter().zip(g.values.iter_mut()) {
            let v = match item {
                RItem::Sum(e) | RItem::Avg(e) | RItem::Expr(e) => eval_expr(e, &ctx),
                RItem::Count | RItem::Star => continue,
            };
            match vals.iter_mut().find(|(x, _)| *x == v) {
                Some((_, sat)) => sat[n] = true,
                None => {
                    let mut sat = vec![false; total];
                    sat[n] = true;
                    vals.push((v, sat));
                }
            }
        }
    }
    Ok(ComboProv {
        keys,
        groups,
        ids: rows.iter().map(|r| r.id).collect(),
    })
}

struct GroupBuild {
    members: Vec<ProvPolynomial>,
    terms: Vec<Vec<AggTerm>>,
    unconditional: usize,
}

/// Concrete result plus provenance for every output.
pub fn execute_debug(
    plan: &CheckedPlan,
    db: &Database,
    views: &ViewSet,
) -> Result<(ResultSet, ProvenanceMap), ExecError> {
    execute_debug_with_cap(plan, db, views, DEFAULT_ENUMERATION_CAP)
}

pub fn execute_debug_with_cap(
    plan: &CheckedPlan,
    db: &Database,
    views: &ViewSet,
    cap: usize,
) -> Result<(ResultSet, ProvenanceMap), ExecError> {
    let result = execute(plan, db, views)?;
    let c = compile(plan, db, views)?;
    let classes = plan.classes();
    let total = if c.sources.iter().any(|s| s.rel.rows.is_empty()) {
        0
    } else {
        c.combo_count()
    };
    let combos = (0..total)
        .into_par_iter()
        .map(|idx| combo_provenance(&c, idx, classes, cap))
        .collect::<Result<Vec<_>, _>>()?;
    let mut prov = ProvenanceMap {
        columns: c.columns.clone(),
        entries: Vec::new(),
    };

    if !c.aggregate {
        for combo in combos {
            let Some((_, g)) = combo.groups.into_iter().next() else {
                continue;
            };
            let existence = factor_assignments(&combo.keys, classes, &g.member);
            let key = TupleKey::Rows(combo.ids);
            let Some(tuple) = result.find(&key) else {
                continue;
            };
            let mut cells = Vec::new();
            let mut vals = g.values.into_iter();
            for (item, slot) in c.items.iter().zip(vals.by_ref()) {
                match item {
                    RItem::Star => {
                        let width: usize = c.sources.iter().map(|s| s.rel.schema.len()).sum();
                        cells.extend(std::iter::repeat_n(None, width));
                    }
                    RItem::Expr(e) if expr_predicts(e) => {
                        cells.push(Some(value_node(AggKind::Sum, &combo.keys, classes, slot, None)))
                    }
                    _ => cells.push(None),
                }
            }
            debug_assert_eq!(cells.len(), tuple.values.len());
            prov.entries.push(ProvEntry {
                key,
                present: true,
                existence,
                cells,
            });
        }
        return Ok((result, prov));
    }

    let mut groups: BTreeMap<Vec<Value>, GroupBuild> = BTreeMap::new();
    for combo in combos {
        for (key, g) in combo.groups {
            let member = factor_assignments(&combo.keys, classes, &g.member);
            let entry = groups.entry(key).or_insert_with(|| GroupBuild {
                members: Vec::new(),
                terms: vec![Vec::new(); c.items.len()],
                unconditional: 0,
            });
            if member == TRUE {
                entry.unconditional += 1;
            }
            for ((item, slot), terms) in c.items.iter().zip(g.values).zip(entry.terms.iter_mut()) {
                match item {
                    RItem::Count => terms.push(AggTerm {
                        coef: 1.0,
                        poly: member.clone(),
                    }),
                    RItem::Sum(_) | RItem::Avg(_) => {
                        for (v, sat) in slot {
                            let coef = v.as_f64().unwrap_or(f64::NAN);
                            if coef != 0.0 {
                                terms.push(AggTerm {
                                    coef,
                                    poly: factor_assignments(&combo.keys, classes, &sat),
                                });
                            }
                        }
                    }
                    _ => {}
                }
            }
            entry.members.push(member);
        }
    }
    let has_avg = c.items.iter().any(|i| matches!(i, RItem::Avg(_)));
    if c.group.is_empty() && !has_avg && groups.is_empty() {
        groups.insert(
            Vec::new(),
            GroupBuild {
                members: Vec::new(),
                terms: vec![Vec::new(); c.items.len()],
                unconditional: 0,
            },
        );
    }
    for (key, g) in groups {
        if has_avg && g.unconditional != g.members.len() {
            return Err(ExecError::Unsupported(
                "AVG over rows whose membership depends on predictions".into(),
            ));
        }
        let existence = if c.group.is_empty() && !has_avg {
            TRUE
        } else {
            ProvPolynomial::or(g.members.clone())
        };
        let cells = c
            .items
            .iter()
            .zip(g.terms)
            .map(|(item, terms)| {
                let (kind, denominator) = match item {
                    RItem::Count => (AggKind::Count, None),
                    RItem::Sum(_) => (AggKind::Sum, None),
                    RItem::Avg(_) => (AggKind::Avg, Some(g.unconditional as f64)),
                    _ => return None,
                };
                Some(AggNode {
                    kind,
                    terms,
                    denominator,
                })
            })
            .collect();
        let key = TupleKey::Group(key);
        prov.entries.push(ProvEntry {
            present: result.find(&key).is_some(),
            key,
            existence,
            cells,
        });
    }
    // Present tuples first, in result order.
    prov.entries.sort_by_key(|e| !e.present);
    Ok((result, prov))
}

fn expr_predicts(e: &RExpr) -> bool {
    match e {
        RExpr::Pred(_) => true,
        RExpr::Col(..) | RExpr::Lit(_) => false,
        RExpr::Bin(_, a, b) | RExpr::Pow(a, b) => expr_predicts(a) || expr_predicts(b),
    }
}

fn value_node(
    kind: AggKind,
    keys: &[RowKey],
    classes: usize,
    slot: Vec<(Value, Vec<bool>)>,
    denominator: Option<f64>,
) -> AggNode {
    AggNode {
        kind,
        terms: slot
            .into_iter()
            .filter_map(|(v, sat)| {
                let coef = v.as_f64()?;
                (coef != 0.0).then(|| AggTerm {
                    coef,
                    poly: factor_assignments(keys, classes, &sat),
                })
            })
            .collect(),
        denominator,
    }
}
