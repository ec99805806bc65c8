//! The two-phase method: decide which predictions must change with an
//! integer program, then rank training records by their influence on the
//! probabilities of the corrected predictions.
//!
//! Variables are one-hot class indicators `t[i,c]` per queried row. Every
//! complaint constraint is kept in separable form `Σᵢ fᵢ(tᵢ) + k ⋈ rhs`,
//! where `fᵢ` is a per-class table for row `i`; this covers counts, sums and
//! averages over single-row conditions as well as the linearised negation of
//! a tuple's existence.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::complaint::{Complaint, ComplaintError, ComplaintOp, DebugContext, Resolved};
use crate::influence::QFunction;
use crate::model::ModelState;
use crate::provenance::{AggNode, ExecError, ProvPolynomial, RowKey, ViewSet};

pub const DNF_CAP: usize = 1_000;
pub const DEFAULT_ENUMERATION_CAP: usize = 100_000;

#[derive(Debug, Error)]
pub enum TwoStepError {
    #[error(transparent)]
    Complaint(#[from] ComplaintError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("unsupported complaint shape: {0}")]
    Unsupported(String),
    #[error("disjunctive normal form exceeds {cap} conjuncts")]
    DnfCap { cap: usize },
    #[error("complaints cannot be met by relabelling predictions")]
    Infeasible,
    #[error("ilp timeout after {nodes} nodes")]
    Timeout { nodes: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Eq,
    Le,
    Ge,
}

impl Sense {
    fn symbol(self) -> &'static str {
        match self {
            Sense::Eq => "=",
            Sense::Le => "<=",
            Sense::Ge => ">=",
        }
    }
}

impl From<ComplaintOp> for Sense {
    fn from(op: ComplaintOp) -> Self {
        match op {
            ComplaintOp::Eq => Sense::Eq,
            ComplaintOp::Le => Sense::Le,
            ComplaintOp::Ge => Sense::Ge,
        }
    }
}

/// `Σ terms[i].1[t_{terms[i].0}] + constant  sense  rhs`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub label: String,
    pub terms: Vec<(usize, Vec<f64>)>,
    pub constant: f64,
    pub sense: Sense,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlpInstance {
    pub classes: usize,
    /// Rows in ascending key order; branching follows this order.
    pub rows: Vec<RowKey>,
    /// Current predicted class per row.
    pub current: Vec<usize>,
    pub constraints: Vec<Constraint>,
}

fn tol(rhs: f64) -> f64 {
    1e-9 * rhs.abs().max(1.0)
}

impl Constraint {
    pub fn holds(&self, classes: &[usize]) -> bool {
        let v = self.constant + self.terms.iter().map(|(i, f)| f[classes[*i]]).sum::<f64>();
        match self.sense {
            Sense::Eq => (v - self.rhs).abs() <= tol(self.rhs),
            Sense::Le => v <= self.rhs + tol(self.rhs),
            Sense::Ge => v >= self.rhs - tol(self.rhs),
        }
    }
}

impl IlpInstance {
    pub fn is_feasible(&self, classes: &[usize]) -> bool {
        classes.len() == self.rows.len()
            && classes.iter().all(|&c| c < self.classes)
            && self.constraints.iter().all(|c| c.holds(classes))
    }

    pub fn objective(&self, classes: &[usize]) -> usize {
        classes.iter().zip(&self.current).filter(|(a, b)| a != b).count()
    }
}

/// LP-style listing.
impl fmt::Display for IlpInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let var = |i: usize, c: usize| format!("t[{},{c}]", self.rows[i]);
        writeln!(f, "minimize")?;
        write!(f, "  changes: {}", self.rows.len())?;
        for (i, &c) in self.current.iter().enumerate() {
            write!(f, " - {}", var(i, c))?;
        }
        writeln!(f)?;
        writeln!(f, "subject to")?;
        for i in 0..self.rows.len() {
            let vs: Vec<String> = (0..self.classes).map(|c| var(i, c)).collect();
            writeln!(f, "  onehot_{i}: {} = 1", vs.join(" + "))?;
        }
        for (k, con) in self.constraints.iter().enumerate() {
            write!(f, "  c{k} [{}]:", con.label)?;
            let mut any = false;
            for (i, table) in &con.terms {
                for (c, w) in table.iter().enumerate() {
                    if *w != 0.0 {
                        write!(f, " {}{} {}", if any { "+ " } else { "" }, w, var(*i, c))?;
                        any = true;
                    }
                }
            }
            if con.constant != 0.0 || !any {
                write!(f, " {}{}", if any { "+ " } else { "" }, con.constant)?;
            }
            writeln!(f, " {} {}", con.sense.symbol(), con.rhs)?;
        }
        writeln!(f, "binary")?;
        for i in 0..self.rows.len() {
            for c in 0..self.classes {
                write!(f, " {}", var(i, c))?;
            }
        }
        writeln!(f)?;
        writeln!(f, "end")
    }
}

// ---------------------------------------------------------------------------
// Construction

/// Separable form of `[p]`: per-row tables plus a constant, or `None` when
/// `p` couples several rows.
fn linearize(p: &ProvPolynomial, classes: usize) -> Option<(Vec<(RowKey, Vec<f64>)>, f64)> {
    let indicator = |row: &RowKey, set: &[usize], negate: bool| {
        let mut t = vec![if negate { 1.0 } else { 0.0 }; classes];
        for &c in set {
            t[c] = if negate { 0.0 } else { 1.0 };
        }
        Some((vec![(row.clone(), t)], 0.0))
    };
    let same_row_atoms = |children: &[ProvPolynomial]| -> Option<(RowKey, Vec<usize>)> {
        let mut row = None;
        let mut set = Vec::new();
        for ch in children {
            match ch {
                ProvPolynomial::Atom { row: r, class } => {
                    if row.get_or_insert(r) != &r {
                        return None;
                    }
                    set.push(*class);
                }
                _ => return None,
            }
        }
        row.map(|r| (r.clone(), set))
    };
    match p {
        ProvPolynomial::Const { value } => Some((Vec::new(), if *value { 1.0 } else { 0.0 })),
        ProvPolynomial::Atom { row, class } => indicator(row, &[*class], false),
        ProvPolynomial::Or { children } => {
            let (row, set) = same_row_atoms(children)?;
            indicator(&row, &set, false)
        }
        ProvPolynomial::Not { child } => match &**child {
            ProvPolynomial::Atom { row, class } => indicator(row, &[*class], true),
            ProvPolynomial::Or { children } => {
                let (row, set) = same_row_atoms(children)?;
                indicator(&row, &set, true)
            }
            _ => None,
        },
        ProvPolynomial::And { .. } => None,
    }
}

type Conjunct = Vec<(RowKey, usize)>;

/// Disjunctive normal form over positive atoms; negations are expanded with
/// the one-hot domain. Conjuncts with conflicting atoms are dropped.
fn dnf(p: &ProvPolynomial, negate: bool, classes: usize) -> Result<Vec<Conjunct>, TwoStepError> {
    let cap = |v: Vec<Conjunct>| {
        if v.len() > DNF_CAP {
            Err(TwoStepError::DnfCap { cap: DNF_CAP })
        } else {
            Ok(v)
        }
    };
    match (p, negate) {
        (ProvPolynomial::Const { value }, _) => Ok(if *value != negate { vec![vec![]] } else { vec![] }),
        (ProvPolynomial::Atom { row, class }, false) => Ok(vec![vec![(row.clone(), *class)]]),
        (ProvPolynomial::Atom { row, class }, true) => cap((0..classes)
            .filter(|c| c != class)
            .map(|c| vec![(row.clone(), c)])
            .collect()),
        (ProvPolynomial::Not { child }, _) => dnf(child, !negate, classes),
        (ProvPolynomial::Or { children }, false) | (ProvPolynomial::And { children }, true) => {
            let mut out = Vec::new();
            for c in children {
                out.extend(dnf(c, negate, classes)?);
                if out.len() > DNF_CAP {
                    return Err(TwoStepError::DnfCap { cap: DNF_CAP });
                }
            }
            Ok(out)
        }
        (ProvPolynomial::And { children }, false) | (ProvPolynomial::Or { children }, true) => {
            let mut acc: Vec<Conjunct> = vec![vec![]];
            for c in children {
                let part = dnf(c, negate, classes)?;
                let mut next = Vec::new();
                for a in &acc {
                    'combine: for b in &part {
                        let mut merged = a.clone();
                        for (row, class) in b {
                            match merged.iter().find(|(r, _)| r == row) {
                                Some((_, c2)) if c2 != class => continue 'combine,
                                Some(_) => {}
                                None => merged.push((row.clone(), *class)),
                            }
                        }
                        merged.sort();
                        if !next.contains(&merged) {
                            next.push(merged);
                        }
                        if next.len() > DNF_CAP {
                            return Err(TwoStepError::DnfCap { cap: DNF_CAP });
                        }
                    }
                }
                acc = next;
            }
            Ok(acc)
        }
    }
}

struct Builder {
    classes: usize,
    rows: BTreeMap<RowKey, usize>,
    constraints: Vec<(String, Vec<(RowKey, Vec<f64>)>, f64, Sense, f64)>,
}

impl Builder {
    fn aggregate(&mut self, label: String, node: &AggNode, sense: Sense, target: f64) -> Result<(), TwoStepError> {
        let scale = node.denominator.unwrap_or(1.0);
        let mut tables: BTreeMap<RowKey, Vec<f64>> = BTreeMap::new();
        let mut constant = 0.0;
        let mut linear = true;
        for term in &node.terms {
            match linearize(&term.poly, self.classes) {
                Some((parts, k)) => {
                    constant += term.coef * k;
                    for (row, t) in parts {
                        let e = tables.entry(row).or_insert_with(|| vec![0.0; self.classes]);
                        for (a, b) in e.iter_mut().zip(t) {
                            *a += term.coef * b;
                        }
                    }
                }
                None => {
                    linear = false;
                    break;
                }
            }
        }
        if linear {
            self.constraints.push((label, tables.into_iter().collect(), constant, sense, target * scale));
            return Ok(());
        }
        // A non-negative aggregate pinned at zero: every term must be false.
        let all_positive = node.terms.iter().all(|t| t.coef > 0.0);
        if all_positive && target == 0.0 && matches!(sense, Sense::Eq | Sense::Le) {
            for (j, term) in node.terms.iter().enumerate() {
                self.falsify(format!("{label} term {j}"), &term.poly)?;
            }
            return Ok(());
        }
        Err(TwoStepError::Unsupported(format!(
            "{label}: aggregate over conditions that couple several rows"
        )))
    }

    fn falsify(&mut self, label: String, p: &ProvPolynomial) -> Result<(), TwoStepError> {
        for conj in dnf(p, false, self.classes)? {
            let n = conj.len() as f64;
            let terms = conj
                .into_iter()
                .map(|(row, c)| {
                    let mut t = vec![0.0; self.classes];
                    t[c] = 1.0;
                    (row, t)
                })
                .collect();
            self.constraints.push((label.clone(), terms, 0.0, Sense::Le, n - 1.0));
        }
        Ok(())
    }

    fn finish(mut self, views: &ViewSet) -> Result<IlpInstance, TwoStepError> {
        for (_, terms, ..) in &self.constraints {
            for (row, _) in terms {
                self.rows.insert(row.clone(), 0);
            }
        }
        let rows: Vec<RowKey> = self.rows.keys().cloned().collect();
        for (i, r) in rows.iter().enumerate() {
            self.rows.insert(r.clone(), i);
        }
        let current = rows
            .iter()
            .map(|r| views.predicted(r))
            .collect::<Result<Vec<_>, _>>()?;
        let constraints = self
            .constraints
            .into_iter()
            .map(|(label, terms, constant, sense, rhs)| {
                // Merge tables of the same row.
                let mut merged: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                for (row, t) in terms {
                    let e = merged.entry(self.rows[&row]).or_insert_with(|| vec![0.0; self.classes]);
                    for (a, b) in e.iter_mut().zip(t) {
                        *a += b;
                    }
                }
                Constraint {
                    label,
                    terms: merged.into_iter().collect(),
                    constant,
                    sense,
                    rhs,
                }
            })
            .collect();
        Ok(IlpInstance {
            classes: self.classes,
            rows,
            current,
            constraints,
        })
    }
}

/// Number of classes seen in the views (at least 2).
pub fn view_classes(views: &ViewSet) -> usize {
    views
        .views
        .values()
        .flat_map(|v| v.rows.first())
        .map(|r| r.probs.len())
        .max()
        .unwrap_or(2)
}

/// Compiles complaints into constraints over the predictions they involve.
pub fn build_ilp(cs: &[Complaint], ctx: &DebugContext) -> Result<IlpInstance, TwoStepError> {
    let mut b = Builder {
        classes: view_classes(&ctx.views),
        rows: BTreeMap::new(),
        constraints: Vec::new(),
    };
    for (n, c) in cs.iter().enumerate() {
        match ctx.resolve(c)? {
            Resolved::Value {
                entry,
                cell,
                concrete,
                op,
                target,
            } => {
                let label = format!("complaint {n} on {}", entry.key);
                match cell {
                    Some(node) => b.aggregate(label, node, op.into(), target)?,
                    None => b.constraints.push((label, Vec::new(), concrete, op.into(), target)),
                }
            }
            Resolved::Tuple { entry } => {
                b.falsify(format!("complaint {n} removes {}", entry.key), &entry.existence)?;
            }
            Resolved::Absent => {}
            Resolved::Prediction { row, class, .. } => {
                let mut t = vec![0.0; b.classes];
                t[class] = 1.0;
                b.constraints.push((format!("complaint {n} fixes {row}"), vec![(row, t)], 0.0, Sense::Eq, 1.0));
            }
        }
    }
    b.finish(&ctx.views)
}

// ---------------------------------------------------------------------------
// Branch and bound

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Deterministic,
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub strategy: Strategy,
    pub seed: u64,
    pub time_budget: Duration,
    /// Solutions collected before sampling under the random strategy.
    pub enumeration_cap: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::Deterministic,
            seed: 0,
            time_budget: Duration::from_secs(60),
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlpAssignment {
    pub rows: Vec<RowKey>,
    pub current: Vec<usize>,
    pub classes: Vec<usize>,
    pub objective: usize,
    pub feasible: bool,
    /// Whether this is the only minimal solution, when known.
    pub unique: Option<bool>,
}

impl IlpAssignment {
    /// Rows whose assigned class differs from the prediction.
    pub fn marked(&self) -> impl Iterator<Item = (&RowKey, usize)> {
        self.rows
            .iter()
            .zip(&self.classes)
            .zip(&self.current)
            .filter(|((_, a), b)| a != b)
            .map(|((r, a), _)| (r, *a))
    }

    pub fn as_map(&self) -> BTreeMap<RowKey, usize> {
        self.rows.iter().cloned().zip(self.classes.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionCount {
    Exact(usize),
    AtLeast(usize),
}

impl SolutionCount {
    pub fn is_unique(self) -> bool {
        self == SolutionCount::Exact(1)
    }
}

struct RowTerm {
    constraint: usize,
    table: Vec<f64>,
    min: f64,
    max: f64,
}

enum Mode {
    /// Find a cheapest solution; prune at `cost + lb >= best`.
    Optimize,
    /// Collect solutions of cost exactly `target`.
    Enumerate { target: usize, cap: usize },
}

struct Solver<'a> {
    ilp: &'a IlpInstance,
    domains: Vec<Vec<usize>>,
    row_terms: Vec<Vec<RowTerm>>,
    /// Per constraint: rows involved.
    members: Vec<Vec<usize>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Constraint value with unassigned rows at their current class.
    cur: Vec<f64>,
    assigned: Vec<usize>,
    cost: usize,
    best: Option<(usize, Vec<usize>)>,
    found: Vec<Vec<usize>>,
    root_lb: usize,
    nodes: u64,
    start: Instant,
    budget: Duration,
    timed_out: bool,
    mode: Mode,
    stamp: Vec<u32>,
    generation: u32,
    scratch: Vec<f64>,
    /// Rows able to move the constraint last passed to `constraint_bound`.
    helpers: Vec<usize>,
}

impl<'a> Solver<'a> {
    fn new(ilp: &'a IlpInstance, budget: Duration) -> Result<Self, TwoStepError> {
        let n = ilp.rows.len();
        let mut row_terms: Vec<Vec<RowTerm>> = (0..n).map(|_| Vec::new()).collect();
        let mut members = Vec::new();
        for (k, con) in ilp.constraints.iter().enumerate() {
            members.push(con.terms.iter().map(|(i, _)| *i).collect());
            for (i, t) in &con.terms {
                row_terms[*i].push(RowTerm {
                    constraint: k,
                    table: t.clone(),
                    min: 0.0,
                    max: 0.0,
                });
            }
        }
        // Single-row constraints restrict the domain directly.
        let mut domains: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let r = ilp.current[i];
                std::iter::once(r).chain((0..ilp.classes).filter(|&c| c != r)).collect()
            })
            .collect();
        for con in &ilp.constraints {
            if let [(i, _)] = con.terms.as_slice() {
                let i = *i;
                domains[i].retain(|&c| {
                    let mut probe = ilp.current.clone();
                    probe[i] = c;
                    con.holds(&probe)
                });
            }
        }
        if domains.iter().any(Vec::is_empty) {
            return Err(TwoStepError::Infeasible);
        }
        let m = ilp.constraints.len();
        let mut lo: Vec<f64> = ilp.constraints.iter().map(|c| c.constant).collect();
        let mut hi = lo.clone();
        let mut cur = lo.clone();
        for (i, terms) in row_terms.iter_mut().enumerate() {
            for t in terms.iter_mut() {
                let vals = domains[i].iter().map(|&c| t.table[c]);
                t.min = vals.clone().fold(f64::INFINITY, f64::min);
                t.max = vals.fold(f64::NEG_INFINITY, f64::max);
                lo[t.constraint] += t.min;
                hi[t.constraint] += t.max;
                cur[t.constraint] += t.table[ilp.current[i]];
            }
        }
        Ok(Self {
            ilp,
            domains,
            row_terms,
            members,
            lo,
            hi,
            cur,
            assigned: vec![usize::MAX; n],
            cost: 0,
            best: None,
            found: Vec::new(),
            root_lb: 0,
            nodes: 0,
            start: Instant::now(),
            budget,
            timed_out: false,
            mode: Mode::Optimize,
            stamp: vec![0; n],
            generation: 0,
            scratch: Vec::new(),
            helpers: Vec::new(),
        })
        .map(|mut s: Solver<'a>| {
            s.scratch.reserve(m);
            s
        })
    }

    fn range_ok(&self, k: usize) -> bool {
        let con = &self.ilp.constraints[k];
        let t = tol(con.rhs);
        match con.sense {
            Sense::Eq => self.lo[k] <= con.rhs + t && self.hi[k] >= con.rhs - t,
            Sense::Le => self.lo[k] <= con.rhs + t,
            Sense::Ge => self.hi[k] >= con.rhs - t,
        }
    }

    /// Assigns class `c` to row `i`; returns false if some constraint can no
    /// longer be met (the assignment is applied either way).
    fn apply(&mut self, i: usize, c: usize) -> bool {
        let r = self.ilp.current[i];
        let mut ok = true;
        for t in &self.row_terms[i] {
            let v = t.table[c];
            self.lo[t.constraint] += v - t.min;
            self.hi[t.constraint] += v - t.max;
            self.cur[t.constraint] += v - t.table[r];
        }
        for t in &self.row_terms[i] {
            ok &= self.range_ok(t.constraint);
        }
        self.assigned[i] = c;
        if c != r {
            self.cost += 1;
        }
        ok
    }

    fn undo(&mut self, i: usize, c: usize) {
        let r = self.ilp.current[i];
        for t in &self.row_terms[i] {
            let v = t.table[c];
            self.lo[t.constraint] -= v - t.min;
            self.hi[t.constraint] -= v - t.max;
            self.cur[t.constraint] -= v - t.table[r];
        }
        self.assigned[i] = usize::MAX;
        if c != r {
            self.cost -= 1;
        }
    }

    /// Fewest changes among unassigned rows needed to meet constraint `k`,
    /// or `None` if impossible.
    fn constraint_bound(&mut self, k: usize) -> Option<usize> {
        let con = &self.ilp.constraints[k];
        let t = tol(con.rhs);
        let v = self.cur[k];
        let need = match con.sense {
            Sense::Eq if (v - con.rhs).abs() <= t => return Some(0),
            Sense::Le if v <= con.rhs + t => return Some(0),
            Sense::Ge if v >= con.rhs - t => return Some(0),
            _ => con.rhs - v,
        };
        self.scratch.clear();
        self.helpers.clear();
        for &i in &self.members[k] {
            if self.assigned[i] != usize::MAX {
                continue;
            }
            let rt = self.row_terms[i].iter().find(|rt| rt.constraint == k).unwrap();
            let base = rt.table[self.ilp.current[i]];
            let gain = if need > 0.0 { rt.max - base } else { base - rt.min };
            if gain > 0.0 {
                self.scratch.push(gain);
                self.helpers.push(i);
            }
        }
        self.scratch.sort_by(|a, b| b.total_cmp(a));
        let mut left = need.abs() - t;
        for (n, g) in self.scratch.iter().enumerate() {
            left -= g;
            if left <= 0.0 {
                return Some(n + 1);
            }
        }
        None
    }

    /// Lower bound on further changes: violated constraints whose helpful
    /// rows are disjoint each need their own changes, and rows whose
    /// prediction lies outside their domain must change anyway.
    fn lower_bound(&mut self, depth: usize) -> Option<usize> {
        // (bound, start, end) into `flat`.
        let mut bounds: Vec<(usize, usize, usize)> = Vec::new();
        let mut flat: Vec<usize> = Vec::new();
        for k in 0..self.ilp.constraints.len() {
            let b = self.constraint_bound(k)?;
            if b > 0 {
                let start = flat.len();
                flat.extend_from_slice(&self.helpers);
                bounds.push((b, start, flat.len()));
            }
        }
        bounds.sort_by(|a, b| b.0.cmp(&a.0).then((a.2 - a.1).cmp(&(b.2 - b.1))));
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.generation = 1;
        }
        let mut total = 0;
        for (b, start, end) in bounds {
            let rows = &flat[start..end];
            if rows.iter().any(|&i| self.stamp[i] == self.generation) {
                continue;
            }
            for &i in rows {
                self.stamp[i] = self.generation;
            }
            total += b;
        }
        for i in depth..self.ilp.rows.len() {
            if self.stamp[i] != self.generation && self.domains[i][0] != self.ilp.current[i] {
                total += 1;
            }
        }
        Some(total)
    }

    fn dfs(&mut self, depth: usize) {
        self.nodes += 1;
        if (self.nodes == 1 || self.nodes.is_multiple_of(1024)) && self.start.elapsed() > self.budget {
            self.timed_out = true;
        }
        if self.timed_out || self.done() {
            return;
        }
        if depth == self.ilp.rows.len() {
            if !(0..self.ilp.constraints.len()).all(|k| self.constraint_bound(k) == Some(0)) {
                return;
            }
            match self.mode {
                Mode::Optimize => {
                    if self.best.as_ref().is_none_or(|(c, _)| self.cost < *c) {
                        self.best = Some((self.cost, self.assigned.clone()));
                    }
                }
                Mode::Enumerate { target, .. } => {
                    if self.cost == target {
                        self.found.push(self.assigned.clone());
                    }
                }
            }
            return;
        }
        for d in 0..self.domains[depth].len() {
            let c = self.domains[depth][d];
            if self.apply(depth, c) {
                if let Some(lb) = self.lower_bound(depth + 1) {
                    let total = self.cost + lb;
                    let go = match self.mode {
                        Mode::Optimize => self.best.as_ref().is_none_or(|(b, _)| total < *b),
                        Mode::Enumerate { target, .. } => total <= target,
                    };
                    if go {
                        self.dfs(depth + 1);
                    }
                }
            }
            self.undo(depth, c);
            if self.timed_out || self.done() {
                return;
            }
        }
    }

    fn done(&self) -> bool {
        match self.mode {
            Mode::Optimize => self.best.as_ref().is_some_and(|(c, _)| *c <= self.root_lb),
            Mode::Enumerate { cap, .. } => self.found.len() >= cap,
        }
    }

    fn run(&mut self, mode: Mode) -> Result<(), TwoStepError> {
        self.mode = mode;
        self.root_lb = match self.lower_bound(0) {
            Some(lb) => lb,
            None => return Ok(()),
        };
        if !(0..self.ilp.constraints.len()).all(|k| self.range_ok(k)) {
            return Ok(());
        }
        self.dfs(0);
        if self.timed_out {
            return Err(TwoStepError::Timeout { nodes: self.nodes });
        }
        Ok(())
    }
}

fn assignment(ilp: &IlpInstance, classes: Vec<usize>, unique: Option<bool>) -> IlpAssignment {
    IlpAssignment {
        rows: ilp.rows.clone(),
        current: ilp.current.clone(),
        objective: ilp.objective(&classes),
        classes,
        feasible: true,
        unique,
    }
}

/// Minimal objective and one optimal assignment.
fn optimize(ilp: &IlpInstance, budget: Duration) -> Result<(usize, Vec<usize>), TwoStepError> {
    let mut s = Solver::new(ilp, budget)?;
    s.run(Mode::Optimize)?;
    s.best.ok_or(TwoStepError::Infeasible)
}

/// Minimal-objective solutions in search order, at most `cap` of them.
pub fn enumerate_minimal(
    ilp: &IlpInstance,
    cap: usize,
    budget: Duration,
) -> Result<Vec<IlpAssignment>, TwoStepError> {
    let start = Instant::now();
    let (opt, _) = optimize(ilp, budget)?;
    let mut s = Solver::new(ilp, budget.saturating_sub(start.elapsed()))?;
    s.run(Mode::Enumerate { target: opt, cap })?;
    Ok(s.found.into_iter().map(|c| assignment(ilp, c, None)).collect())
}

pub fn solve_ilp(ilp: &IlpInstance, opts: &SolveOptions) -> Result<IlpAssignment, TwoStepError> {
    let start = Instant::now();
    match opts.strategy {
        Strategy::Deterministic => {
            let (_, classes) = optimize(ilp, opts.time_budget)?;
            let rest = opts.time_budget.saturating_sub(start.elapsed());
            let unique = match enumerate_minimal(ilp, 2, rest) {
                Ok(all) => Some(all.len() == 1),
                Err(_) => None,
            };
            Ok(assignment(ilp, classes, unique))
        }
        Strategy::UniformRandom => {
            let all = enumerate_minimal(ilp, opts.enumeration_cap, opts.time_budget)?;
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let pick = rng.gen_range(0..all.len());
            let unique = (all.len() < opts.enumeration_cap).then_some(all.len() == 1);
            let mut a = all.into_iter().nth(pick).unwrap();
            a.unique = unique;
            Ok(a)
        }
    }
}

/// Number of distinct minimal solutions, exact below `cap`.
pub fn ambiguity_count(ilp: &IlpInstance, cap: usize, budget: Duration) -> Result<SolutionCount, TwoStepError> {
    let n = enumerate_minimal(ilp, cap, budget)?.len();
    Ok(if n >= cap {
        SolutionCount::AtLeast(cap)
    } else {
        SolutionCount::Exact(n)
    })
}

// ---------------------------------------------------------------------------
// Misprediction encoding

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeMode {
    MarkedOnly,
    All,
}

/// `q(θ) = −Σ p_{tᵢ}(xᵢ, θ)` over the encoded rows.
#[derive(Debug, Clone)]
pub struct MispredictionQ {
    rows: Vec<(Vec<f64>, usize)>,
    description: String,
}

impl MispredictionQ {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl QFunction for MispredictionQ {
    fn value(&self, m: &ModelState) -> f64 {
        -self
            .rows
            .iter()
            .map(|(x, c)| m.probs_unchecked(x)[*c])
            .sum::<f64>()
    }

    fn grad(&self, m: &ModelState) -> Vec<f64> {
        let mut g = vec![0.0; m.param_len()];
        let mut adj = vec![0.0; m.classes];
        for (x, c) in &self.rows {
            let p = m.probs_unchecked(x);
            adj.iter_mut().for_each(|a| *a = 0.0);
            adj[*c] = -1.0;
            m.backprop_probs(x, &p, &adj, &mut g);
        }
        g
    }

    fn description(&self) -> String {
        self.description.clone()
    }
}

pub fn encode_mispredictions(
    a: &IlpAssignment,
    views: &ViewSet,
    mode: EncodeMode,
) -> Result<MispredictionQ, TwoStepError> {
    let mut rows = Vec::new();
    let mut marked = 0;
    for ((key, &t), &r) in a.rows.iter().zip(&a.classes).zip(&a.current) {
        if mode == EncodeMode::MarkedOnly && t == r {
            continue;
        }
        marked += usize::from(t != r);
        rows.push((views.row(key)?.features.clone(), t));
    }
    Ok(MispredictionQ {
        description: format!("-sum p_t(x) over {} rows ({marked} marked)", rows.len()),
        rows,
    })
}
