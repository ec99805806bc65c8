//! Continuous relaxation of provenance and its translation into a
//! differentiable complaint function.
//!
//! Atoms become class probabilities, `AND` a product, `OR` one minus the
//! product of complements, `NOT` a complement, and aggregates the weighted
//! sum of their relaxed terms (the expected value when the terms are
//! independent).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::complaint::{Complaint, ComplaintError, ComplaintOp, DebugContext, Resolved};
use crate::influence::QFunction;
use crate::model::ModelState;
use crate::provenance::{AggNode, ExecError, ProvPolynomial, RowKey, ViewSet};

/// Upper bound on distinct atoms for [`exact_expectation`].
pub const EXACT_ATOM_CAP: usize = 20;

#[derive(Debug, Error)]
pub enum HolisticError {
    #[error("{atoms} distinct atoms exceed the enumeration cap of {cap}")]
    AtomCap { atoms: usize, cap: usize },
    #[error("no probabilities for row {0}")]
    MissingRow(String),
    #[error(transparent)]
    Complaint(#[from] ComplaintError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum RelaxedExpr {
    Const { value: f64 },
    Prob { row: RowKey, class: usize },
    Product { children: Vec<RelaxedExpr> },
    /// `1 − Π(1 − xᵢ)`
    OrRule { children: Vec<RelaxedExpr> },
    /// `1 − x`
    Complement { child: Box<RelaxedExpr> },
    /// `Σ coefᵢ·xᵢ / denominator`
    WeightedSum {
        coefs: Vec<f64>,
        children: Vec<RelaxedExpr>,
        denominator: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelaxOptions {
    /// Relax a disjunction of pairwise exclusive children as their sum,
    /// which is exact for them, instead of the independence rule.
    pub exact_or: bool,
}

/// Atoms every satisfying assignment of `p` must make true.
fn required_atoms(p: &ProvPolynomial) -> Vec<(&RowKey, usize)> {
    match p {
        ProvPolynomial::Atom { row, class } => vec![(row, *class)],
        ProvPolynomial::And { children } => children.iter().flat_map(required_atoms).collect(),
        _ => Vec::new(),
    }
}

fn exclusive(a: &ProvPolynomial, b: &ProvPolynomial) -> bool {
    let ra = required_atoms(a);
    let rb = required_atoms(b);
    ra.iter()
        .any(|(r, c)| rb.iter().any(|(s, d)| r == s && c != d))
}

pub fn relax_polynomial(p: &ProvPolynomial) -> RelaxedExpr {
    relax_polynomial_with(p, RelaxOptions::default())
}

pub fn relax_polynomial_with(p: &ProvPolynomial, opts: RelaxOptions) -> RelaxedExpr {
    match p {
        ProvPolynomial::Const { value } => RelaxedExpr::Const {
            value: if *value { 1.0 } else { 0.0 },
        },
        ProvPolynomial::Atom { row, class } => RelaxedExpr::Prob {
            row: row.clone(),
            class: *class,
        },
        ProvPolynomial::And { children } => RelaxedExpr::Product {
            children: children.iter().map(|c| relax_polynomial_with(c, opts)).collect(),
        },
        ProvPolynomial::Or { children } => {
            let relaxed = children.iter().map(|c| relax_polynomial_with(c, opts)).collect();
            let pairwise_exclusive = opts.exact_or
                && children
                    .iter()
                    .enumerate()
                    .all(|(i, a)| children[i + 1..].iter().all(|b| exclusive(a, b)));
            if pairwise_exclusive {
                RelaxedExpr::WeightedSum {
                    coefs: vec![1.0; children.len()],
                    children: relaxed,
                    denominator: None,
                }
            } else {
                RelaxedExpr::OrRule { children: relaxed }
            }
        }
        ProvPolynomial::Not { child } => RelaxedExpr::Complement {
            child: Box::new(relax_polynomial_with(child, opts)),
        },
    }
}

pub fn relax_aggregate(node: &AggNode, opts: RelaxOptions) -> RelaxedExpr {
    RelaxedExpr::WeightedSum {
        coefs: node.terms.iter().map(|t| t.coef).collect(),
        children: node
            .terms
            .iter()
            .map(|t| relax_polynomial_with(&t.poly, opts))
            .collect(),
        denominator: node.denominator,
    }
}

impl RelaxedExpr {
    /// Direct recursive evaluation; `prob` gives `p_{row,class}`.
    pub fn eval<F: Fn(&RowKey, usize) -> f64>(&self, prob: &F) -> f64 {
        match self {
            RelaxedExpr::Const { value } => *value,
            RelaxedExpr::Prob { row, class } => prob(row, *class),
            RelaxedExpr::Product { children } => children.iter().map(|c| c.eval(prob)).product(),
            RelaxedExpr::OrRule { children } => {
                1.0 - children.iter().map(|c| 1.0 - c.eval(prob)).product::<f64>()
            }
            RelaxedExpr::Complement { child } => 1.0 - child.eval(prob),
            RelaxedExpr::WeightedSum {
                coefs,
                children,
                denominator,
            } => {
                let s: f64 = coefs.iter().zip(children).map(|(w, c)| w * c.eval(prob)).sum();
                denominator.map_or(s, |d| s / d)
            }
        }
    }

    fn collect_rows<'a>(&'a self, out: &mut Vec<&'a RowKey>) {
        match self {
            RelaxedExpr::Const { .. } => {}
            RelaxedExpr::Prob { row, .. } => out.push(row),
            RelaxedExpr::Product { children }
            | RelaxedExpr::OrRule { children }
            | RelaxedExpr::WeightedSum { children, .. } => {
                children.iter().for_each(|c| c.collect_rows(out))
            }
            RelaxedExpr::Complement { child } => child.collect_rows(out),
        }
    }
}

// ---------------------------------------------------------------------------
// Flattened evaluation with reverse-mode gradients

#[derive(Debug, Clone)]
enum TNode {
    Const(f64),
    Prob(usize, usize),
    Product(Vec<usize>),
    OrRule(Vec<usize>),
    Complement(usize),
    Sum(Vec<usize>, Vec<f64>, f64),
}

/// Several relaxed expressions flattened into one post-order node list,
/// together with the features of every row they read.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<TNode>,
    rows: Vec<RowKey>,
    features: Vec<Vec<f64>>,
    row_index: HashMap<RowKey, usize>,
}

/// Forward values of a tape at one parameter vector.
pub struct TapeValues {
    probs: Vec<Vec<f64>>,
    values: Vec<f64>,
}

impl TapeValues {
    pub fn get(&self, root: usize) -> f64 {
        self.values[root]
    }
}

impl Tape {
    /// Appends `e`, returning the index of its root.
    pub fn push(&mut self, e: &RelaxedExpr, views: &ViewSet) -> Result<usize, HolisticError> {
        let mut rows = Vec::new();
        e.collect_rows(&mut rows);
        for r in rows {
            if !self.row_index.contains_key(r) {
                let view_row = views.row(r)?;
                self.row_index.insert(r.clone(), self.rows.len());
                self.rows.push(r.clone());
                self.features.push(view_row.features.clone());
            }
        }
        Ok(self.push_node(e))
    }

    fn push_node(&mut self, e: &RelaxedExpr) -> usize {
        let node = match e {
            RelaxedExpr::Const { value } => TNode::Const(*value),
            RelaxedExpr::Prob { row, class } => TNode::Prob(self.row_index[row], *class),
            RelaxedExpr::Product { children } => {
                TNode::Product(children.iter().map(|c| self.push_node(c)).collect())
            }
            RelaxedExpr::OrRule { children } => {
                TNode::OrRule(children.iter().map(|c| self.push_node(c)).collect())
            }
            RelaxedExpr::Complement { child } => TNode::Complement(self.push_node(child)),
            RelaxedExpr::WeightedSum {
                coefs,
                children,
                denominator,
            } => TNode::Sum(
                children.iter().map(|c| self.push_node(c)).collect(),
                coefs.clone(),
                1.0 / denominator.unwrap_or(1.0),
            ),
        };
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn forward(&self, m: &ModelState) -> TapeValues {
        let probs: Vec<Vec<f64>> = self.features.iter().map(|x| m.probs_unchecked(x)).collect();
        let mut values = vec![0.0; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            values[i] = match n {
                TNode::Const(v) => *v,
                TNode::Prob(r, c) => probs[*r][*c],
                TNode::Product(cs) => cs.iter().map(|&c| values[c]).product(),
                TNode::OrRule(cs) => 1.0 - cs.iter().map(|&c| 1.0 - values[c]).product::<f64>(),
                TNode::Complement(c) => 1.0 - values[*c],
                TNode::Sum(cs, ws, scale) => {
                    scale * cs.iter().zip(ws).map(|(&c, w)| w * values[c]).sum::<f64>()
                }
            };
        }
        TapeValues { probs, values }
    }

    /// Gradient with respect to θ of `Σ seed_r · value(root_r)`.
    pub fn backward(&self, m: &ModelState, fwd: &TapeValues, seeds: &[(usize, f64)]) -> Vec<f64> {
        let mut adj = vec![0.0; self.nodes.len()];
        for &(root, s) in seeds {
            adj[root] += s;
        }
        let mut leaf_adj = vec![vec![0.0; m.classes]; self.rows.len()];
        let v = &fwd.values;
        for i in (0..self.nodes.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            match &self.nodes[i] {
                TNode::Const(_) => {}
                TNode::Prob(r, c) => leaf_adj[*r][*c] += a,
                TNode::Product(cs) => spread_product(cs, a, &mut adj, |c| v[c]),
                TNode::OrRule(cs) => spread_product(cs, a, &mut adj, |c| 1.0 - v[c]),
                TNode::Complement(c) => adj[*c] -= a,
                TNode::Sum(cs, ws, scale) => {
                    for (&c, w) in cs.iter().zip(ws) {
                        adj[c] += a * w * scale;
                    }
                }
            }
        }
        let mut grad = vec![0.0; m.param_len()];
        for ((x, p), la) in self.features.iter().zip(&fwd.probs).zip(&leaf_adj) {
            if la.iter().any(|v| *v != 0.0) {
                m.backprop_probs(x, p, la, &mut grad);
            }
        }
        grad
    }
}

/// Adds `a · Π_{j≠i} g(xⱼ)` to each child adjoint, using prefix and suffix
/// products so zero factors are handled exactly. This is the derivative of
/// both `Π xᵢ` (with `g(x) = x`) and `1 − Π(1 − xᵢ)` (with `g(x) = 1 − x`).
fn spread_product<G: Fn(usize) -> f64>(cs: &[usize], a: f64, adj: &mut [f64], g: G) {
    let n = cs.len();
    let mut suffix = vec![1.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] * g(cs[i]);
    }
    let mut prefix = 1.0;
    for i in 0..n {
        adj[cs[i]] += a * prefix * suffix[i + 1];
        prefix *= g(cs[i]);
    }
}

/// Value and θ-gradient of one relaxed expression at model `m`.
pub fn eval_relaxed(
    e: &RelaxedExpr,
    m: &ModelState,
    views: &ViewSet,
) -> Result<(f64, Vec<f64>), HolisticError> {
    let mut tape = Tape::default();
    let root = tape.push(e, views)?;
    let fwd = tape.forward(m);
    let grad = tape.backward(m, &fwd, &[(root, 1.0)]);
    Ok((fwd.get(root), grad))
}

/// Exact probability that `p` holds when each row independently takes class
/// `c` with probability `probs[row][c]`.
///
/// Only the classes that occur in atoms are distinguished per row; all other
/// classes are lumped into one outcome.
pub fn exact_expectation(
    p: &ProvPolynomial,
    probs: &BTreeMap<RowKey, Vec<f64>>,
) -> Result<f64, HolisticError> {
    let atoms = p.atoms();
    if atoms.len() > EXACT_ATOM_CAP {
        return Err(HolisticError::AtomCap {
            atoms: atoms.len(),
            cap: EXACT_ATOM_CAP,
        });
    }
    // Per row: (class, probability) outcomes, with usize::MAX for "other".
    let mut rows: Vec<(RowKey, Vec<(usize, f64)>)> = Vec::new();
    for (row, class) in &atoms {
        if rows.last().map(|(r, _)| r) != Some(row) {
            rows.push((row.clone(), Vec::new()));
        }
        let pr = probs
            .get(row)
            .ok_or_else(|| HolisticError::MissingRow(row.to_string()))?;
        rows.last_mut().unwrap().1.push((*class, pr[*class]));
    }
    for (_, outs) in rows.iter_mut() {
        let rest = 1.0 - outs.iter().map(|(_, q)| q).sum::<f64>();
        if rest > 0.0 {
            outs.push((usize::MAX, rest));
        }
    }
    let index: HashMap<&RowKey, usize> = rows.iter().enumerate().map(|(i, (r, _))| (r, i)).collect();
    let mut choice = vec![0usize; rows.len()];
    let mut total = 0.0;
    loop {
        let weight: f64 = rows.iter().zip(&choice).map(|((_, o), &k)| o[k].1).product();
        if weight > 0.0 && p.eval(&|r: &RowKey| rows[index[r]].1[choice[index[r]]].0) {
            total += weight;
        }
        // Odometer step.
        let mut i = rows.len();
        loop {
            if i == 0 {
                return Ok(total);
            }
            i -= 1;
            choice[i] += 1;
            if choice[i] < rows[i].1.len() {
                break;
            }
            choice[i] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// Complaint encoding

#[derive(Debug, Clone)]
struct SquaredTerm {
    root: usize,
    target: f64,
}

/// `q(θ) = Σ (rᵢ(θ) − targetᵢ)² + constant` over the active complaints.
#[derive(Debug, Clone)]
pub struct HolisticQ {
    tape: Tape,
    terms: Vec<SquaredTerm>,
    constant: f64,
    description: String,
}

impl HolisticQ {
    pub fn is_trivial(&self) -> bool {
        self.terms.is_empty()
    }
}

impl QFunction for HolisticQ {
    fn value(&self, m: &ModelState) -> f64 {
        let fwd = self.tape.forward(m);
        self.constant
            + self
                .terms
                .iter()
                .map(|t| (fwd.get(t.root) - t.target).powi(2))
                .sum::<f64>()
    }

    fn grad(&self, m: &ModelState) -> Vec<f64> {
        let fwd = self.tape.forward(m);
        let seeds: Vec<(usize, f64)> = self
            .terms
            .iter()
            .map(|t| (t.root, 2.0 * (fwd.get(t.root) - t.target)))
            .collect();
        self.tape.backward(m, &fwd, &seeds)
    }

    fn description(&self) -> String {
        self.description.clone()
    }
}

/// Builds the summed complaint function.
///
/// Inequality complaints take part only while the concrete value violates
/// them; a value that does not depend on predictions contributes a constant.
pub fn encode_complaints(
    cs: &[Complaint],
    ctx: &DebugContext,
    opts: RelaxOptions,
) -> Result<HolisticQ, HolisticError> {
    let mut tape = Tape::default();
    let mut terms = Vec::new();
    let mut constant = 0.0;
    let mut parts = Vec::new();
    for c in cs {
        match ctx.resolve(c)? {
            Resolved::Value {
                cell,
                concrete,
                op,
                target,
                entry,
            } => {
                if op != ComplaintOp::Eq && op.holds(concrete, target) {
                    parts.push(format!("{}: inactive", entry.key));
                    continue;
                }
                match cell {
                    Some(node) => {
                        let root = tape.push(&relax_aggregate(node, opts), &ctx.views)?;
                        terms.push(SquaredTerm { root, target });
                    }
                    None => constant += (concrete - target).powi(2),
                }
                parts.push(format!("({} - {target})^2", entry.key));
            }
            Resolved::Tuple { entry } => {
                let root = tape.push(&relax_polynomial_with(&entry.existence, opts), &ctx.views)?;
                terms.push(SquaredTerm { root, target: 0.0 });
                parts.push(format!("exists({})^2", entry.key));
            }
            Resolved::Absent => {}
            Resolved::Prediction { row, class, .. } => {
                let root = tape.push(&RelaxedExpr::Prob { row: row.clone(), class }, &ctx.views)?;
                terms.push(SquaredTerm { root, target: 1.0 });
                parts.push(format!("(p[{row}={class}] - 1)^2"));
            }
        }
    }
    Ok(HolisticQ {
        tape,
        terms,
        constant,
        description: if parts.is_empty() {
            "0".into()
        } else {
            parts.join(" + ")
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provenance::{AggTerm, PredictionView, ViewRow, FALSE, TRUE};
    use crate::query::AggKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn key(i: i64) -> RowKey {
        RowKey::new("R", i)
    }

    fn atom(i: i64, c: usize) -> ProvPolynomial {
        ProvPolynomial::atom(key(i), c)
    }

    fn table(ps: &[(i64, Vec<f64>)]) -> BTreeMap<RowKey, Vec<f64>> {
        ps.iter().map(|(i, p)| (key(*i), p.clone())).collect()
    }

    fn relaxed_at(p: &ProvPolynomial, t: &BTreeMap<RowKey, Vec<f64>>) -> f64 {
        relax_polynomial(p).eval(&|r: &RowKey, c| t[r][c])
    }

    #[test]
    fn relaxation_rules() {
        let t = table(&[(0, vec![0.5, 0.5]), (1, vec![0.5, 0.5])]);
        let and = ProvPolynomial::and(vec![atom(0, 1), atom(1, 1)]);
        assert_eq!(relaxed_at(&and, &t), 0.25);
        let t = table(&[(0, vec![0.7, 0.3]), (1, vec![0.6, 0.4])]);
        let or = ProvPolynomial::or(vec![atom(0, 1), atom(1, 1)]);
        assert!((relaxed_at(&or, &t) - 0.58).abs() < 1e-15);
        let t = table(&[(0, vec![0.8, 0.2]), (1, vec![0.3, 0.7])]);
        let count = AggNode {
            kind: AggKind::Count,
            terms: vec![
                AggTerm { coef: 1.0, poly: atom(0, 1) },
                AggTerm { coef: 1.0, poly: atom(1, 1) },
            ],
            denominator: None,
        };
        let r = relax_aggregate(&count, RelaxOptions::default()).eval(&|r: &RowKey, c| t[r][c]);
        assert!((r - 0.9).abs() < 1e-15);
    }

    #[test]
    fn certain_digits_relax_to_their_number() {
        let mut terms = Vec::new();
        for (pos, id) in [(0, 1), (1, 2)] {
            for j in 1..10 {
                terms.push(AggTerm {
                    coef: 10f64.powi(pos) * j as f64,
                    poly: atom(id, j),
                });
            }
        }
        let node = AggNode { kind: AggKind::Sum, terms, denominator: None };
        let one_hot = |c: usize| {
            let mut v = vec![0.0; 10];
            v[c] = 1.0;
            v
        };
        let t = table(&[(1, one_hot(5)), (2, one_hot(9))]);
        let r = relax_aggregate(&node, RelaxOptions::default()).eval(&|r: &RowKey, c| t[r][c]);
        assert_eq!(r, 95.0);
    }

    #[test]
    fn non_read_once_divergence() {
        let x = atom(0, 1);
        let y = atom(1, 1);
        let p = ProvPolynomial::or(vec![
            ProvPolynomial::and(vec![x.clone(), y.clone()]),
            ProvPolynomial::and(vec![x, ProvPolynomial::not(y)]),
        ]);
        let t = table(&[(0, vec![0.3, 0.7]), (1, vec![0.6, 0.4])]);
        assert!((exact_expectation(&p, &t).unwrap() - 0.7).abs() < 1e-12);
        assert!((relaxed_at(&p, &t) - 0.5824).abs() < 1e-12);
        assert_eq!(exact_expectation(&TRUE, &t).unwrap(), 1.0);
        assert_eq!(exact_expectation(&FALSE, &t).unwrap(), 0.0);
    }

    #[test]
    fn exact_or_mode_sums_exclusive_disjuncts() {
        let p = ProvPolynomial::or(
            (0..3)
                .map(|j| ProvPolynomial::and(vec![atom(0, j), ProvPolynomial::atom(RowKey::new("L", 0), j)]))
                .collect(),
        );
        let mut t = table(&[(0, vec![0.2, 0.3, 0.5])]);
        t.insert(RowKey::new("L", 0), vec![0.6, 0.1, 0.3]);
        let exact = exact_expectation(&p, &t).unwrap();
        let summed = relax_polynomial_with(&p, RelaxOptions { exact_or: true })
            .eval(&|r: &RowKey, c| t[r][c]);
        assert!((exact - summed).abs() < 1e-15);
        assert!((exact - (0.12 + 0.03 + 0.15)).abs() < 1e-15);
        assert!((relaxed_at(&p, &t) - exact).abs() > 1e-3);
    }

    #[test]
    fn atom_cap_is_enforced() {
        let p = ProvPolynomial::or((0..21).map(|i| atom(i, 1)).collect());
        let t: BTreeMap<RowKey, Vec<f64>> = (0..21).map(|i| (key(i), vec![0.5, 0.5])).collect();
        assert!(matches!(exact_expectation(&p, &t), Err(HolisticError::AtomCap { atoms: 21, .. })));
    }

    fn views_for(n: i64, d: usize, classes: usize, seed: u64) -> ViewSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|i| ViewRow {
                row_id: i,
                predicted: 0,
                probs: vec![1.0 / classes as f64; classes],
                features: (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            })
            .collect();
        let mut vs = ViewSet::default();
        vs.insert(PredictionView::from_rows(0, "R", vec![], rows));
        vs
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let classes = 3;
        let views = views_for(4, 3, classes, 2);
        let p = ProvPolynomial::or(vec![
            ProvPolynomial::and(vec![atom(0, 1), atom(1, 2)]),
            ProvPolynomial::and(vec![atom(2, 0), ProvPolynomial::not(atom(3, 1))]),
            atom(1, 1),
        ]);
        let e = relax_polynomial(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = ModelState::with_theta(3, classes, 1e-3, theta).unwrap();
        let (v, g) = eval_relaxed(&e, &m, &views).unwrap();
        let at = |m: &ModelState| {
            e.eval(&|r: &RowKey, c: usize| m.probs_unchecked(&views.row(r).unwrap().features)[c])
        };
        assert!((v - at(&m)).abs() < 1e-14);
        let h = 1e-6;
        for j in 0..m.param_len() {
            let mut up = m.clone();
            up.theta[j] += h;
            let mut dn = m.clone();
            dn.theta[j] -= h;
            let fd = (at(&up) - at(&dn)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-6 * fd.abs().max(1e-3), "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn product_gradient_survives_zero_factor() {
        let views = views_for(1, 1, 2, 0);
        let e = RelaxedExpr::Product {
            children: vec![
                RelaxedExpr::Const { value: 0.0 },
                RelaxedExpr::Prob { row: key(0), class: 1 },
            ],
        };
        let m = ModelState::zeros(1, 2, 1e-3);
        let (v, g) = eval_relaxed(&e, &m, &views).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0]);
        let e = RelaxedExpr::Product {
            children: vec![
                RelaxedExpr::Prob { row: key(0), class: 0 },
                RelaxedExpr::Complement { child: Box::new(RelaxedExpr::Const { value: 1.0 }) },
            ],
        };
        let (_, g) = eval_relaxed(&e, &m, &views).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn leaf_free_expression_is_constant() {
        let views = ViewSet::default();
        let e = relax_polynomial(&TRUE);
        let m = ModelState::zeros(2, 2, 1e-3);
        assert_eq!(eval_relaxed(&e, &m, &views).unwrap(), (1.0, vec![0.0, 0.0]));
    }

    #[test]
    fn missing_leaf_row_is_an_error() {
        let e = relax_polynomial(&atom(5, 1));
        let m = ModelState::zeros(2, 2, 1e-3);
        assert!(eval_relaxed(&e, &m, &ViewSet::default()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        /// Read-once formulas over distinct rows (one atom per row).
        fn read_once(depth: u32) -> impl Strategy<Value = (ProvPolynomial, usize)> {
            let leaf = (0usize..3).prop_map(|c| (ProvPolynomial::Atom { row: key(0), class: c }, 1usize));
            leaf.prop_recursive(depth, 12, 3, |inner| {
                (proptest::collection::vec(inner, 1..4), 0u8..3).prop_map(|(kids, op)| {
                    let n = kids.iter().map(|k| k.1).sum();
                    let children: Vec<ProvPolynomial> = kids.into_iter().map(|k| k.0).collect();
                    let p = match op {
                        0 => ProvPolynomial::And { children },
                        1 => ProvPolynomial::Or { children },
                        _ => ProvPolynomial::Not {
                            child: Box::new(ProvPolynomial::And { children }),
                        },
                    };
                    (p, n)
                })
            })
        }

        fn renumber(p: &ProvPolynomial, next: &mut i64) -> ProvPolynomial {
            match p {
                ProvPolynomial::Atom { class, .. } => {
                    *next += 1;
                    ProvPolynomial::Atom { row: key(*next - 1), class: *class }
                }
                ProvPolynomial::And { children } => ProvPolynomial::And {
                    children: children.iter().map(|c| renumber(c, next)).collect(),
                },
                ProvPolynomial::Or { children } => ProvPolynomial::Or {
                    children: children.iter().map(|c| renumber(c, next)).collect(),
                },
                ProvPolynomial::Not { child } => ProvPolynomial::Not { child: Box::new(renumber(child, next)) },
                c => c.clone(),
            }
        }

        fn probs_for(n: usize, seed: u64) -> BTreeMap<RowKey, Vec<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n as i64)
                .map(|i| {
                    let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    (key(i), raw.into_iter().map(|v| v / s).collect())
                })
                .collect()
        }

        proptest! {
            #[test]
            fn read_once_relaxation_is_exact((p, n) in read_once(3), seed in any::<u64>()) {
                let p = renumber(&p, &mut 0);
                prop_assume!(n <= EXACT_ATOM_CAP);
                prop_assert!(p.is_read_once());
                let t = probs_for(n, seed);
                let exact = exact_expectation(&p, &t).unwrap();
                let relaxed = relaxed_at(&p, &t);
                prop_assert!((exact - relaxed).abs() <= 1e-12, "{} vs {}", exact, relaxed);
            }

            #[test]
            fn relaxation_at_one_hot_matches_boolean((p, _) in read_once(3), classes in proptest::collection::vec(0usize..3, 12)) {
                let mut next = 0;
                let p = renumber(&p, &mut next);
                // Reuse rows to get non-read-once formulas too.
                let class_of = |r: &RowKey| classes[(r.row_id as usize) % classes.len()];
                let one_hot = |r: &RowKey, c: usize| if class_of(r) == c { 1.0 } else { 0.0 };
                prop_assert_eq!(relax_polynomial(&p).eval(&one_hot), if p.eval(&class_of) { 1.0 } else { 0.0 });
            }

            #[test]
            fn positive_formulas_are_monotone(
                (p, n) in read_once(3).prop_filter("no negation", |(p, _)| !format!("{p:?}").contains("Not")),
                seed in any::<u64>(), row in 0usize..12, bump in 0.0f64..0.5,
            ) {
                let p = renumber(&p, &mut 0);
                let t = probs_for(n, seed);
                let r = key((row % n) as i64);
                let base = relaxed_at(&p, &t);
                let mut t2 = t.clone();
                for c in 0..3 {
                    let v = &mut t2.get_mut(&r).unwrap()[c];
                    *v = (*v + bump).min(1.0);
                }
                prop_assert!(relaxed_at(&p, &t2) >= base - 1e-15);
            }
        }
    }
}
