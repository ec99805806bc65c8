//! Metrics, brute-force oracles, the two theory constructions and the
//! synthetic experiments.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::complaint::{Complaint, ComplaintError, ComplaintOp};
use crate::holistic::{encode_complaints, HolisticError, RelaxOptions};
use crate::influence::{score_training_records, self_influence_scores, CgSettings, InfluenceError, QFunction};
use crate::model::{loss, train, Hyper, ModelError, ModelState};
use crate::orchestrator::{debug, prepare_context, DebugError, Method, NamedQuery, SessionConfig};
use crate::provenance::{Database, ExecError, RowKey, TupleKey};
use crate::query::{parse_query, validate_plan, QueryError};
use crate::tabular::{
    inject_corruption, Column, ColumnKind, Condition, CorruptionSpec, DataError, Relation, Row, TrainingRecord,
    TrainingSet, Value,
};
use crate::twostep::{build_ilp, encode_mispredictions, enumerate_minimal, EncodeMode, IlpInstance, TwoStepError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("the corrupted set is empty")]
    EmptyCorrupted,
    #[error("no deletion of at most {cap} records resolves the complaints")]
    InfeasibleWithinCap { cap: usize },
    #[error("time budget exceeded after {checked} subsets")]
    BudgetExceeded { checked: usize },
    #[error("training did not converge (gradient norm {grad_norm:e})")]
    NotConverged { grad_norm: f64 },
    #[error("invalid dimensions: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Complaint(#[from] ComplaintError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
    #[error(transparent)]
    Holistic(#[from] HolisticError),
    #[error(transparent)]
    TwoStep(#[from] TwoStepError),
    #[error(transparent)]
    Debug(#[from] DebugError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub recalls: Vec<f64>,
    pub auc: f64,
}

/// `r_k = |top-k ∩ corrupted| / K` for `k = 1..K`. A ranking shorter than
/// `K` keeps its final recall.
pub fn recall_curve(ranked: &[i64], corrupted: &HashSet<i64>) -> Result<Vec<f64>, BenchError> {
    let big_k = corrupted.len();
    if big_k == 0 {
        return Err(BenchError::EmptyCorrupted);
    }
    let mut seen = HashSet::new();
    let mut hits = 0usize;
    let mut out = Vec::with_capacity(big_k);
    for k in 0..big_k {
        if let Some(id) = ranked.get(k) {
            if corrupted.contains(id) && seen.insert(*id) {
                hits += 1;
            }
        }
        out.push(hits as f64 / big_k as f64);
    }
    Ok(out)
}

/// `(2/K) Σ r_k`. Exceeds 1 for a perfect ranking at small `K`.
pub fn auc_cr(recalls: &[f64]) -> f64 {
    if recalls.is_empty() {
        return 0.0;
    }
    2.0 / recalls.len() as f64 * recalls.iter().sum::<f64>()
}

impl MetricSeries {
    pub fn from_ranking(ranked: &[i64], corrupted: &HashSet<i64>) -> Result<Self, BenchError> {
        let recalls = recall_curve(ranked, corrupted)?;
        Ok(Self {
            auc: auc_cr(&recalls),
            recalls,
        })
    }

    /// Precision at `k` derived from recall: `hits / k`.
    pub fn precision(&self, k: usize) -> f64 {
        let big_k = self.recalls.len() as f64;
        self.recalls[k - 1] * big_k / k as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), BenchError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "r_k"])?;
        for (k, r) in self.recalls.iter().enumerate() {
            w.write_record([(k + 1).to_string(), r.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Whitespace-separated columns for gnuplot.
    pub fn write_gnuplot<W: Write>(&self, mut out: W) -> Result<(), BenchError> {
        writeln!(out, "# k r_k")?;
        for (k, r) in self.recalls.iter().enumerate() {
            writeln!(out, "{} {}", k + 1, r)?;
        }
        Ok(())
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

// ---------------------------------------------------------------------------
// Oracles

/// Cold start with a tight gradient tolerance.
pub fn oracle_hyper(lambda: f64) -> Hyper {
    Hyper {
        lambda,
        tolerance: 1e-10,
        max_iterations: 1000,
    }
}

fn train_checked(ts: &TrainingSet, hyper: &Hyper) -> Result<ModelState, BenchError> {
    let m = train(ts, hyper, None)?;
    if !m.converged {
        return Err(BenchError::NotConverged { grad_norm: m.grad_norm });
    }
    Ok(m)
}

/// A training set, a database and complaints over named queries.
#[derive(Debug, Clone)]
pub struct Problem {
    pub ts: TrainingSet,
    pub db: Database,
    pub queries: Vec<NamedQuery>,
    pub complaints: Vec<Complaint>,
    pub hyper: Hyper,
}

impl Problem {
    /// Whether the model trained on `ts` satisfies every complaint.
    pub fn resolved_by(&self, ts: &TrainingSet) -> Result<bool, BenchError> {
        let m = train_checked(ts, &self.hyper)?;
        let ctx = prepare_context(&m, &self.db, &self.queries, 0)?;
        Ok(ctx.all_satisfied(&self.complaints)?)
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        if idx[i] == i + n - k {
            return out;
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Every minimum-size deletion set (up to `max_subset_size`) after which a
/// retrained model satisfies the complaints. Sets hold record ids, sorted.
pub fn brute_force_min_fix(
    p: &Problem,
    max_subset_size: usize,
    budget: Duration,
) -> Result<Vec<Vec<i64>>, BenchError> {
    let start = Instant::now();
    let ids = p.ts.ids();
    let mut checked = 0;
    for size in 0..=max_subset_size.min(ids.len().saturating_sub(1)) {
        let combos = combinations(ids.len(), size);
        let hits: Vec<Result<Option<Vec<i64>>, BenchError>> = combos
            .par_iter()
            .map(|c| {
                if start.elapsed() > budget {
                    return Err(BenchError::BudgetExceeded { checked: 0 });
                }
                let removed: HashSet<i64> = c.iter().map(|&i| ids[i]).collect();
                let ok = p.resolved_by(&p.ts.without(&removed))?;
                let mut set: Vec<i64> = removed.into_iter().collect();
                set.sort_unstable();
                Ok(ok.then_some(set))
            })
            .collect();
        let mut found = Vec::new();
        for h in hits {
            match h {
                Err(BenchError::BudgetExceeded { .. }) => return Err(BenchError::BudgetExceeded { checked }),
                other => {
                    checked += 1;
                    if let Some(s) = other? {
                        found.push(s);
                    }
                }
            }
        }
        if !found.is_empty() {
            found.sort();
            return Ok(found);
        }
    }
    Err(BenchError::InfeasibleWithinCap { cap: max_subset_size })
}

/// `q(θ*_{T∖{z}}) − q(θ*_T)` per record, in training-set order, by cold
/// retraining.
pub fn loo_retrain_delta_q(
    ts: &TrainingSet,
    m: &ModelState,
    q: &dyn QFunction,
    hyper: &Hyper,
) -> Result<Vec<f64>, BenchError> {
    let base = q.value(m);
    ts.records
        .par_iter()
        .map(|z| {
            let rest = ts.without(&HashSet::from([z.id]));
            let mz = train_checked(&rest, hyper)?;
            Ok(q.value(&mz) - base)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Construction helpers

fn feature_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

/// Relation `name(id, x0..x{d-1})`.
pub fn feature_relation(name: &str, rows: &[(i64, Vec<f64>)]) -> Result<Relation, BenchError> {
    let d = rows.first().map_or(0, |r| r.1.len());
    let mut schema = vec![Column::new("id", ColumnKind::Integer)];
    schema.extend(feature_names(d).into_iter().map(|n| Column::new(n, ColumnKind::Real)));
    let rows = rows
        .iter()
        .map(|(id, x)| Row {
            id: *id,
            values: std::iter::once(Value::Int(*id)).chain(x.iter().map(|&v| Value::Real(v))).collect(),
        })
        .collect();
    Ok(Relation::new(name, schema, "id", rows)?)
}

fn named_query(db: &Database, id: &str, sql: &str, d: usize, classes: usize) -> Result<NamedQuery, BenchError> {
    let catalog = db.catalog(&feature_names(d), &BTreeMap::new());
    let plan = validate_plan(&parse_query(sql)?, &catalog, d, classes)?;
    Ok(NamedQuery { id: id.into(), plan })
}

fn count_key() -> TupleKey {
    TupleKey::Group(vec![])
}

const COUNT_ATTR: &str = "COUNT(*)";

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// ---------------------------------------------------------------------------
// Ambiguity construction

/// The noisy point lives on axis 0 with label 0; clean data and all but `m`
/// queried rows live on the remaining axes. The query counts predictions of
/// class 1 and the complaint says the count should be `k`.
#[derive(Debug, Clone)]
pub struct AppendixA {
    pub problem: Problem,
    pub noisy_id: i64,
    /// Queried rows parallel to the noisy point.
    pub special_rows: Vec<i64>,
    pub ilp: IlpInstance,
    pub n: usize,
    pub m: usize,
    pub k: usize,
}

const CLEAN_A: usize = 60;

pub fn build_appendix_a_instance(n: usize, m: usize, k: usize, seed: u64) -> Result<AppendixA, BenchError> {
    if n <= m || k == 0 || k > n {
        return Err(BenchError::Invalid(format!("need n > m >= 0 and 1 <= k <= n, got n={n} m={m} k={k}")));
    }
    let d = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for id in 0..CLEAN_A as i64 {
        let g = gaussian(&mut rng, 2);
        let label = usize::from(rng.gen::<f64>() < sigmoid(3.0 * g[0]));
        records.push(TrainingRecord {
            id,
            features: vec![0.0, g[0], g[1]],
            label,
        });
    }
    let noisy_id = CLEAN_A as i64;
    records.push(TrainingRecord {
        id: noisy_id,
        features: vec![1.0, 0.0, 0.0],
        label: 0,
    });
    let ts = TrainingSet::new(records, d, 2)?;

    // Clean queried rows sit deep in class 0; special rows on the noisy axis.
    let mut rows = Vec::new();
    let mut special_rows = Vec::new();
    let special: HashSet<usize> = rand::seq::index::sample(&mut rng, n, m).into_iter().collect();
    for i in 0..n {
        let id = i as i64;
        if special.contains(&i) {
            rows.push((id, vec![rng.gen_range(0.5..1.5), 0.0, 0.0]));
            special_rows.push(id);
        } else {
            let g = gaussian(&mut rng, 1);
            rows.push((id, vec![0.0, -2.0 - rng.gen::<f64>(), g[0]]));
        }
    }
    let db = Database::new([feature_relation("Q", &rows)?]);
    let q = named_query(&db, "count", "SELECT COUNT(*) FROM Q WHERE PREDICT(Q) = 1", d, 2)?;
    let complaints = vec![Complaint::value("count", count_key(), COUNT_ATTR, ComplaintOp::Eq, k as f64)];
    let problem = Problem {
        ts,
        db,
        queries: vec![q],
        complaints,
        hyper: Hyper {
            lambda: 1e-2,
            ..oracle_hyper(1e-2)
        },
    };
    let m0 = train_checked(&problem.ts, &problem.hyper)?;
    let ctx = prepare_context(&m0, &problem.db, &problem.queries, 0)?;
    let ilp = build_ilp(&problem.complaints, &ctx)?;
    if ilp.current.iter().any(|&c| c != 0) {
        return Err(BenchError::Invalid("a queried row is already predicted 1".into()));
    }
    Ok(AppendixA {
        problem,
        noisy_id,
        special_rows,
        ilp,
        n,
        m,
        k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendixAResult {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub minimal_solutions: usize,
    /// Fraction of minimal solutions under which the noisy point scores
    /// nonzero.
    pub exact_fraction: f64,
    pub draws: usize,
    pub empirical_frequency: f64,
}

/// Scores the noisy point under every minimal solution, then replays
/// `draws` seeded uniform picks (the same pick the random solver strategy
/// makes for seed `seed + i`).
pub fn appendix_a_experiment(n: usize, m: usize, k: usize, draws: usize, seed: u64) -> Result<AppendixAResult, BenchError> {
    let inst = build_appendix_a_instance(n, m, k, seed)?;
    let p = &inst.problem;
    let model = train_checked(&p.ts, &p.hyper)?;
    let ctx = prepare_context(&model, &p.db, &p.queries, 0)?;
    let solutions = enumerate_minimal(&inst.ilp, usize::MAX, Duration::from_secs(600))?;
    let cg = CgSettings {
        residual_tol: 1e-10,
        ..CgSettings::default()
    };
    let nonzero: Vec<bool> = solutions
        .par_iter()
        .map(|a| {
            let q = encode_mispredictions(a, &ctx.views, EncodeMode::MarkedOnly)?;
            let s = score_training_records(&model, &p.ts, &q, &cg)?;
            Ok(s.get(inst.noisy_id).unwrap().abs() > 1e-12)
        })
        .collect::<Result<_, BenchError>>()?;
    let hits = (0..draws as u64)
        .filter(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(*i));
            nonzero[rng.gen_range(0..nonzero.len())]
        })
        .count();
    Ok(AppendixAResult {
        n,
        m,
        k,
        minimal_solutions: solutions.len(),
        exact_fraction: nonzero.iter().filter(|&&b| b).count() as f64 / nonzero.len() as f64,
        draws,
        empirical_frequency: hits as f64 / draws.max(1) as f64,
    })
}

// ---------------------------------------------------------------------------
// Complaint-value construction

/// `K` corrupted records on axis 0, all labelled 1 (truly 0); clean records
/// on the other axes. The complaint says a queried row on axis 0 should be
/// class 0.
#[derive(Debug, Clone)]
pub struct AppendixC {
    pub problem: Problem,
    pub corrupted_ids: Vec<i64>,
    pub clean_ids: Vec<i64>,
}

pub fn build_appendix_c_instance(big_k: usize, clean_count: usize, seed: u64) -> Result<AppendixC, BenchError> {
    if big_k == 0 || clean_count == 0 {
        return Err(BenchError::Invalid("need at least one corrupted and one clean record".into()));
    }
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut clean_ids = Vec::new();
    let mut corrupted_ids = Vec::new();
    let total = big_k + clean_count;
    let order: Vec<usize> = {
        let mut v: Vec<usize> = (0..total).collect();
        v.shuffle(&mut rng);
        v
    };
    for (slot, &id) in order.iter().enumerate() {
        let id = id as i64;
        if slot < big_k {
            records.push(TrainingRecord {
                id,
                features: vec![rng.gen_range(4.0..8.0), 0.0, 0.0, 0.0],
                label: 1,
            });
            corrupted_ids.push(id);
        } else {
            let g = gaussian(&mut rng, 3);
            let label = usize::from(rng.gen::<f64>() < sigmoid(2.0 * (g[0] - g[1])));
            records.push(TrainingRecord {
                id,
                features: vec![0.0, g[0], g[1], g[2]],
                label,
            });
            clean_ids.push(id);
        }
    }
    records.sort_by_key(|r| r.id);
    corrupted_ids.sort_unstable();
    clean_ids.sort_unstable();
    let ts = TrainingSet::new(records, d, 2)?;
    let mut rows = vec![(0, vec![1.5, 0.0, 0.0, 0.0])];
    for id in 1..5 {
        let g = gaussian(&mut rng, 3);
        rows.push((id, vec![0.0, g[0], g[1], g[2]]));
    }
    let db = Database::new([feature_relation("Q", &rows)?]);
    let q = named_query(&db, "rows", "SELECT * FROM Q WHERE PREDICT(Q) = 1", d, 2)?;
    let complaints = vec![Complaint::prediction("rows", &RowKey::new("Q", 0), 0)];
    let lambda = 1e-3 / total as f64;
    Ok(AppendixC {
        problem: Problem {
            ts,
            db,
            queries: vec![q],
            complaints,
            hyper: oracle_hyper(lambda),
        },
        corrupted_ids,
        clean_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendixCResult {
    pub corrupted: usize,
    pub clean: usize,
    pub max_corrupted_loss: f64,
    pub min_corrupted_self_influence: f64,
    pub min_corrupted_score: f64,
    pub max_clean_abs_score: f64,
    pub separated: bool,
}

pub fn appendix_c_experiment(big_k: usize, clean_count: usize, seed: u64) -> Result<AppendixCResult, BenchError> {
    let inst = build_appendix_c_instance(big_k, clean_count, seed)?;
    let p = &inst.problem;
    let m = train_checked(&p.ts, &p.hyper)?;
    let ctx = prepare_context(&m, &p.db, &p.queries, 0)?;
    let q = encode_complaints(&p.complaints, &ctx, RelaxOptions::default())?;
    let cg = CgSettings {
        residual_tol: 1e-10,
        ..CgSettings::default()
    };
    let scores = score_training_records(&m, &p.ts, &q, &cg)?;
    let si = self_influence_scores(&m, &p.ts, &cg)?;
    let corrupted: HashSet<i64> = inst.corrupted_ids.iter().copied().collect();
    let mut max_loss = f64::NEG_INFINITY;
    let mut min_si = f64::INFINITY;
    let mut min_score = f64::INFINITY;
    let mut max_clean = 0.0f64;
    for (i, z) in p.ts.records.iter().enumerate() {
        if corrupted.contains(&z.id) {
            max_loss = max_loss.max(loss(&m, z)?);
            min_si = min_si.min(si.scores[i]);
            min_score = min_score.min(scores.scores[i]);
        } else {
            max_clean = max_clean.max(scores.scores[i].abs());
        }
    }
    Ok(AppendixCResult {
        corrupted: big_k,
        clean: clean_count,
        max_corrupted_loss: max_loss,
        min_corrupted_self_influence: min_si,
        min_corrupted_score: min_score,
        max_clean_abs_score: max_clean,
        separated: min_score > 0.0 && max_clean <= 1e-8,
    })
}

// ---------------------------------------------------------------------------
// Synthetic experiments

/// A debugging problem with known corruptions.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub problem: Problem,
    pub corrupted_ids: Vec<i64>,
}

impl Scenario {
    /// Runs `method` for `K` removals, ten per iteration, without stopping
    /// at satisfaction, and scores the ranking.
    pub fn run(&self, method: Method, k_per_iteration: usize) -> Result<MetricSeries, BenchError> {
        let mut cfg = SessionConfig::new(method, k_per_iteration, self.corrupted_ids.len());
        cfg.hyper = self.problem.hyper;
        cfg.stop_when_satisfied = false;
        let p = &self.problem;
        let report = debug(&cfg, &p.ts, &p.db, &p.queries, &p.complaints)?;
        MetricSeries::from_ranking(&report.delta, &self.corrupted_ids.iter().copied().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplaintVariant {
    /// The count under a model trained without corruptions.
    Correct,
    /// 1.2 × the correct count.
    Overshoot,
    /// Halfway between the observed and the correct count.
    Partial,
    /// 0.8 × the observed count.
    Wrong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderingConfig {
    pub n_train: usize,
    pub n_query: usize,
    pub rate: f64,
    pub lambda: f64,
}

impl Default for OrderingConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_query: 1000,
            rate: 0.5,
            lambda: 1e-3,
        }
    }
}

fn two_class_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<(Vec<f64>, usize)> {
    (0..n)
        .map(|_| {
            let g = gaussian(rng, 2);
            let label = usize::from(rng.gen::<f64>() < sigmoid(3.0 * (g[0] + g[1])));
            (vec![1.0, g[0], g[1]], label)
        })
        .collect()
}

/// Two classes with a noisy linear boundary; a share of the class-1 labels
/// with `x2 >= 1` is flipped to 0. The complaint is on the count of class-1
/// predictions over the queried rows.
pub fn ordering_scenario(seed: u64, cfg: &OrderingConfig, variant: ComplaintVariant) -> Result<Scenario, BenchError> {
    let d = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<TrainingRecord> = two_class_points(&mut rng, cfg.n_train)
        .into_iter()
        .enumerate()
        .map(|(id, (features, label))| TrainingRecord {
            id: id as i64,
            features,
            label,
        })
        .collect();
    let clean = TrainingSet::new(records, d, 2)?;
    let spec = CorruptionSpec {
        predicate: vec![
            Condition::FeatureRange {
                index: 2,
                min: 1.0,
                max: f64::INFINITY,
            },
            Condition::LabelEq { label: 1 },
        ],
        flip_to: 0,
        rate: cfg.rate,
        seed: seed ^ 0x5eed,
    };
    let (ts, corrupted_ids) = inject_corruption(&clean, &spec)?;
    let rows: Vec<(i64, Vec<f64>)> = two_class_points(&mut rng, cfg.n_query)
        .into_iter()
        .enumerate()
        .map(|(i, (x, _))| (i as i64, x))
        .collect();
    let db = Database::new([feature_relation("Q", &rows)?]);
    let q = named_query(&db, "count", "SELECT COUNT(*) FROM Q WHERE PREDICT(Q) = 1", d, 2)?;
    let hyper = Hyper {
        lambda: cfg.lambda,
        ..Hyper::default()
    };
    let count = |ts: &TrainingSet| -> Result<f64, BenchError> {
        let m = train_checked(ts, &hyper)?;
        let ctx = prepare_context(&m, &db, std::slice::from_ref(&q), 0)?;
        Ok(ctx.queries["count"].result.tuples[0].values[0].as_f64().unwrap_or(0.0))
    };
    let truth = count(&clean)?;
    let observed = count(&ts)?;
    let target = match variant {
        ComplaintVariant::Correct => truth,
        ComplaintVariant::Overshoot => (1.2 * truth).round(),
        ComplaintVariant::Partial => ((truth + observed) / 2.0).round(),
        ComplaintVariant::Wrong => (0.8 * observed).round(),
    };
    let complaints = vec![Complaint::value("count", count_key(), COUNT_ATTR, ComplaintOp::Eq, target)];
    Ok(Scenario {
        problem: Problem {
            ts,
            db,
            queries: vec![q],
            complaints,
            hyper,
        },
        corrupted_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAuc {
    pub method: Method,
    pub auc: f64,
}

pub fn ordering_experiment(seed: u64, cfg: &OrderingConfig) -> Result<Vec<MethodAuc>, BenchError> {
    let s = ordering_scenario(seed, cfg, ComplaintVariant::Correct)?;
    [Method::Holistic, Method::Twostep, Method::Loss, Method::Infloss]
        .into_iter()
        .map(|method| {
            Ok(MethodAuc {
                method,
                auc: s.run(method, 10)?.auc,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplaintErrorResult {
    pub seed: u64,
    pub correct: f64,
    pub overshoot: f64,
    pub partial: f64,
    pub wrong: f64,
}

pub fn complaint_error_experiment(seed: u64, cfg: &OrderingConfig) -> Result<ComplaintErrorResult, BenchError> {
    let auc = |v| -> Result<f64, BenchError> { Ok(ordering_scenario(seed, cfg, v)?.run(Method::Holistic, 10)?.auc) };
    Ok(ComplaintErrorResult {
        seed,
        correct: auc(ComplaintVariant::Correct)?,
        overshoot: auc(ComplaintVariant::Overshoot)?,
        partial: auc(ComplaintVariant::Partial)?,
        wrong: auc(ComplaintVariant::Wrong)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub per_class: usize,
    pub left: usize,
    pub right: usize,
    pub rate: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            per_class: 200,
            left: 100,
            right: 5,
            rate: 0.3,
        }
    }
}

const CENTERS: [(f64, f64); 4] = [(0.0, 3.0), (0.0, 0.0), (0.0, -3.0), (2.0, 0.0)];

fn blob(rng: &mut ChaCha8Rng, class: usize) -> Vec<f64> {
    let g = gaussian(rng, 2);
    vec![1.0, CENTERS[class].0 + g[0], CENTERS[class].1 + g[1]]
}

/// Four Gaussian blobs; a share of class 1 is relabelled 3. `L` holds class-1
/// rows, `R` class-3 rows, and the query joins them on equal predictions,
/// which should return nothing. Tuple complaints cover join results with
/// exactly one mispredicted side; a share `alpha` of them is replaced by
/// prediction complaints on both sides.
pub fn ambiguity_scenario(seed: u64, alpha: f64, cfg: &SweepConfig) -> Result<Scenario, BenchError> {
    let d = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for class in 0..4 {
        for _ in 0..cfg.per_class {
            records.push((blob(&mut rng, class), class));
        }
    }
    records.shuffle(&mut rng);
    let records = records
        .into_iter()
        .enumerate()
        .map(|(id, (features, label))| TrainingRecord {
            id: id as i64,
            features,
            label,
        })
        .collect();
    let clean = TrainingSet::new(records, d, 4)?;
    let spec = CorruptionSpec {
        predicate: vec![Condition::LabelEq { label: 1 }],
        flip_to: 3,
        rate: cfg.rate,
        seed: seed ^ 0xa11,
    };
    let (ts, corrupted_ids) = inject_corruption(&clean, &spec)?;
    let left: Vec<(i64, Vec<f64>)> = (0..cfg.left as i64).map(|i| (i, blob(&mut rng, 1))).collect();
    let right: Vec<(i64, Vec<f64>)> = (0..cfg.right as i64).map(|i| (i, blob(&mut rng, 3))).collect();
    let db = Database::new([feature_relation("L", &left)?, feature_relation("R", &right)?]);
    let q = named_query(&db, "join", "SELECT * FROM L, R WHERE PREDICT(L) = PREDICT(R)", d, 4)?;
    let hyper = Hyper {
        lambda: 1e-3,
        ..Hyper::default()
    };
    let m = train_checked(&ts, &hyper)?;
    let ctx = prepare_context(&m, &db, std::slice::from_ref(&q), 0)?;
    let wrong = |rel: &str, id: i64, truth: usize| ctx.views.predicted(&RowKey::new(rel, id)).map(|c| c != truth);
    let mut tuples = Vec::new();
    for t in &ctx.queries["join"].result.tuples {
        if let TupleKey::Rows(ids) = &t.key {
            if wrong("L", ids[0], 1)? != wrong("R", ids[1], 3)? {
                tuples.push((ids[0], ids[1]));
            }
        }
    }
    tuples.shuffle(&mut rng);
    let replaced = (alpha * tuples.len() as f64).round() as usize;
    let mut complaints = Vec::new();
    let mut fixed = HashSet::new();
    for (i, (l, r)) in tuples.into_iter().enumerate() {
        if i < replaced {
            if fixed.insert(("L", l)) {
                complaints.push(Complaint::prediction("join", &RowKey::new("L", l), 1));
            }
            if fixed.insert(("R", r)) {
                complaints.push(Complaint::prediction("join", &RowKey::new("R", r), 3));
            }
        } else {
            complaints.push(Complaint::tuple("join", TupleKey::Rows(vec![l, r])));
        }
    }
    Ok(Scenario {
        problem: Problem {
            ts,
            db,
            queries: vec![q],
            complaints,
            hyper,
        },
        corrupted_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub alpha: f64,
    pub method: Method,
    pub complaints: usize,
    pub auc: f64,
}

pub fn ambiguity_sweep(seeds: &[u64], alphas: &[f64], cfg: &SweepConfig) -> Result<Vec<SweepRow>, BenchError> {
    let jobs: Vec<(u64, f64, Method)> = seeds
        .iter()
        .flat_map(|&s| {
            alphas
                .iter()
                .flat_map(move |&a| [Method::Holistic, Method::Twostep, Method::Loss].map(|m| (s, a, m)))
        })
        .collect();
    jobs.into_par_iter()
        .map(|(seed, alpha, method)| {
            let s = ambiguity_scenario(seed, alpha, cfg)?;
            Ok(SweepRow {
                seed,
                alpha,
                method,
                complaints: s.problem.complaints.len(),
                auc: s.run(method, 10)?.auc,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Micro instances

/// Twelve 1-D records plus an intercept, one class-1 record near the
/// boundary relabelled 0, and a count complaint over queried rows that
/// include one placed between the clean and corrupted boundaries.
pub fn micro_instance(seed: u64) -> Result<Scenario, BenchError> {
    let d = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<i64> = (0..12).collect();
    ids.shuffle(&mut rng);
    let mut records = Vec::new();
    for i in 0..12 {
        let side = if i < 6 { -1.0 } else { 1.0 };
        let x = side * (0.5 + 0.5 * (i % 6) as f64 + rng.gen_range(-0.2..0.2));
        records.push(TrainingRecord {
            id: ids[i],
            features: vec![x, 1.0],
            label: usize::from(i >= 6),
        });
    }
    records.sort_by_key(|r| r.id);
    let clean = TrainingSet::new(records, d, 2)?;
    let target = clean
        .records
        .iter()
        .filter(|r| r.label == 1)
        .min_by(|a, b| a.features[0].total_cmp(&b.features[0]))
        .unwrap()
        .id;
    let mut ts = clean.clone();
    for r in &mut ts.records {
        if r.id == target {
            r.label = 0;
        }
    }
    let hyper = oracle_hyper(1e-2);
    let boundary = |ts: &TrainingSet| -> Result<f64, BenchError> {
        let m = train_checked(ts, &hyper)?;
        Ok(-m.theta[1] / m.theta[0])
    };
    let (bc, bk) = (boundary(&clean)?, boundary(&ts)?);
    let rows = vec![
        (0, vec![(bc + bk) / 2.0, 1.0]),
        (1, vec![-3.0, 1.0]),
        (2, vec![3.0, 1.0]),
        (3, vec![-2.5, 1.0]),
        (4, vec![2.5, 1.0]),
    ];
    let db = Database::new([feature_relation("Q", &rows)?]);
    let q = named_query(&db, "count", "SELECT COUNT(*) FROM Q WHERE PREDICT(Q) = 1", d, 2)?;
    let mut problem = Problem {
        ts: clean,
        db,
        queries: vec![q],
        complaints: vec![],
        hyper,
    };
    let m = train_checked(&problem.ts, &hyper)?;
    let ctx = prepare_context(&m, &problem.db, &problem.queries, 0)?;
    let truth = ctx.queries["count"].result.tuples[0].values[0].as_f64().unwrap_or(0.0);
    problem.ts = ts;
    problem.complaints = vec![Complaint::value("count", count_key(), COUNT_ATTR, ComplaintOp::Eq, truth)];
    Ok(Scenario {
        problem,
        corrupted_ids: vec![target],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub seed: u64,
    pub minimal_sets: Vec<Vec<i64>>,
    pub first_removed: Option<i64>,
    pub agrees: bool,
    pub resolved: bool,
}

/// Holistic with one removal per iteration against the brute-force minimal
/// deletion sets.
pub fn oracle_agreement(seed: u64) -> Result<OracleResult, BenchError> {
    let s = micro_instance(seed)?;
    let p = &s.problem;
    let minimal_sets = brute_force_min_fix(p, 3, Duration::from_secs(300))?;
    let mut cfg = SessionConfig::new(Method::Holistic, 1, p.ts.len() - 1);
    cfg.hyper = p.hyper;
    let report = debug(&cfg, &p.ts, &p.db, &p.queries, &p.complaints)?;
    let first_removed = report.delta.first().copied();
    let agrees = first_removed.is_some_and(|id| minimal_sets.iter().any(|set| set.contains(&id)));
    Ok(OracleResult {
        seed,
        minimal_sets,
        first_removed,
        agrees,
        resolved: report.resolved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[i64]) -> HashSet<i64> {
        ids.iter().copied().collect()
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_curve(&[5, 1, 2], &set(&[1, 2])).unwrap(), vec![0.0, 0.5]);
        assert_eq!(recall_curve(&[2, 1], &set(&[1, 2])).unwrap(), vec![0.5, 1.0]);
        assert_eq!(recall_curve(&[7, 8, 9], &set(&[1, 2])).unwrap(), vec![0.0, 0.0]);
        assert_eq!(recall_curve(&[1], &set(&[1, 2])).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(recall_curve(&[1], &set(&[])), Err(BenchError::EmptyCorrupted)));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_cr(&[0.0; 4]), 0.0);
        assert!((auc_cr(&[0.25, 0.5, 0.75, 1.0]) - 1.25).abs() < 1e-15);
        assert!((auc_cr(&[0.0, 0.25, 0.5, 0.5]) - 0.625).abs() < 1e-15);
    }

    #[test]
    fn precision_from_recall() {
        let s = MetricSeries::from_ranking(&[1, 9, 2, 8], &set(&[1, 2, 3, 4])).unwrap();
        assert_eq!(s.precision(1), 1.0);
        assert_eq!(s.precision(2), 0.5);
        assert!((s.precision(3) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn metric_outputs() {
        let s = MetricSeries::from_ranking(&[5, 1, 2], &set(&[1, 2])).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "k,r_k\n1,0\n2,0.5\n");
        let mut buf = Vec::new();
        s.write_gnuplot(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "# k r_k\n1 0\n2 0.5\n");
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(5, 2).len(), 10);
        assert_eq!(combinations(4, 0), vec![Vec::<usize>::new()]);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert!(combinations(2, 3).is_empty());
        let c = combinations(6, 3);
        assert_eq!(c.len(), 20);
        let unique: HashSet<Vec<usize>> = c.into_iter().collect();
        assert_eq!(unique.len(), 20);
    }

    #[test]
    fn appendix_a_rejects_bad_dimensions() {
        assert!(build_appendix_a_instance(3, 3, 1, 0).is_err());
        assert!(build_appendix_a_instance(3, 0, 0, 0).is_err());
        assert!(build_appendix_c_instance(0, 5, 0).is_err());
    }

    #[test]
    fn appendix_a_small_instance() {
        let a = build_appendix_a_instance(10, 1, 1, 3).unwrap();
        assert_eq!(a.ilp.rows.len(), 10);
        assert_eq!(a.special_rows.len(), 1);
        let r = appendix_a_experiment(10, 1, 1, 200, 3).unwrap();
        assert_eq!(r.minimal_solutions, 10);
        assert!((r.exact_fraction - 0.1).abs() < 1e-12);
        let r0 = appendix_a_experiment(10, 0, 1, 50, 3).unwrap();
        assert_eq!(r0.exact_fraction, 0.0);
        assert_eq!(r0.empirical_frequency, 0.0);
    }

    #[test]
    fn appendix_a_two_of_six() {
        // C(6,2) = 15 minimal solutions, C(4,2) = 6 avoid both special rows.
        let r = appendix_a_experiment(6, 2, 2, 10, 1).unwrap();
        assert_eq!(r.minimal_solutions, 15);
        assert!((r.exact_fraction - 9.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn satisfied_complaints_need_no_deletion() {
        let mut s = micro_instance(0).unwrap();
        s.problem.complaints.clear();
        assert_eq!(brute_force_min_fix(&s.problem, 1, Duration::from_secs(60)).unwrap(), vec![Vec::<i64>::new()]);
    }

    #[test]
    fn micro_instance_is_fixed_by_its_corruption() {
        let s = micro_instance(4).unwrap();
        let p = &s.problem;
        assert!(!p.resolved_by(&p.ts).unwrap());
        let fixed = p.ts.without(&s.corrupted_ids.iter().copied().collect());
        assert!(p.resolved_by(&fixed).unwrap());
        let sets = brute_force_min_fix(p, 2, Duration::from_secs(60)).unwrap();
        assert!(sets.iter().all(|s| s.len() == 1));
        assert!(sets.contains(&s.corrupted_ids));
    }

    #[test]
    fn cap_below_the_needed_size_is_infeasible() {
        // Two identical corrupted records: removing either alone leaves the
        // other, so the fix needs both.
        let mut s = micro_instance(2).unwrap();
        let target = s.corrupted_ids[0];
        let dup = s.problem.ts.records.iter().find(|r| r.id == target).unwrap().clone();
        let mut records = s.problem.ts.records.clone();
        records.push(TrainingRecord { id: 100, ..dup });
        s.problem.ts = TrainingSet::new(records, 2, 2).unwrap();
        let p = &s.problem;
        match brute_force_min_fix(p, 1, Duration::from_secs(60)) {
            Err(BenchError::InfeasibleWithinCap { cap: 1 }) => {
                let sets = brute_force_min_fix(p, 2, Duration::from_secs(120)).unwrap();
                assert!(sets.iter().all(|s| s.len() == 2));
                assert!(sets.contains(&vec![target.min(100), target.max(100)]));
            }
            other => panic!("expected infeasible within cap 1, got {other:?}"),
        }
    }

    #[test]
    fn loo_constant_q_and_duplicates() {
        let s = micro_instance(1).unwrap();
        let p = &s.problem;
        let m = train(&p.ts, &p.hyper, None).unwrap();
        let zero = loo_retrain_delta_q(&p.ts, &m, &crate::influence::ConstantQ(2.0), &p.hyper).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        let mut records = p.ts.records.clone();
        let dup = records[3].clone();
        records.push(TrainingRecord { id: 99, ..dup });
        let ts = TrainingSet::new(records, 2, 2).unwrap();
        let m = train(&ts, &p.hyper, None).unwrap();
        let ctx = prepare_context(&m, &p.db, &p.queries, 0).unwrap();
        let q = encode_complaints(&p.complaints, &ctx, RelaxOptions::default()).unwrap();
        let dq = loo_retrain_delta_q(&ts, &m, &q, &p.hyper).unwrap();
        assert!((dq[3] - dq[ts.len() - 1]).abs() <= 1e-9 * dq[3].abs().max(1e-9));
    }

    #[test]
    fn ambiguity_scenario_has_both_complaint_kinds() {
        let cfg = SweepConfig::default();
        let lo = ambiguity_scenario(1, 0.1, &cfg).unwrap();
        let hi = ambiguity_scenario(1, 0.8, &cfg).unwrap();
        let count = |s: &Scenario, kind| s.problem.complaints.iter().filter(|c| c.kind == kind).count();
        use crate::complaint::ComplaintKind;
        assert!(count(&lo, ComplaintKind::Tuple) > count(&hi, ComplaintKind::Tuple));
        assert!(count(&lo, ComplaintKind::Prediction) < count(&hi, ComplaintKind::Prediction));
        assert_eq!(lo.corrupted_ids.len(), 60);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn recall_monotone_and_bounded(
                ranked in proptest::collection::vec(0i64..30, 0..40),
                corrupted in proptest::collection::hash_set(0i64..30, 1..15),
            ) {
                let r = recall_curve(&ranked, &corrupted).unwrap();
                prop_assert_eq!(r.len(), corrupted.len());
                prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }

            #[test]
            fn moving_a_hit_up_raises_auc(
                perm in Just((0i64..20).collect::<Vec<_>>()).prop_shuffle(),
                corrupted in proptest::collection::hash_set(0i64..20, 1..10),
            ) {
                // Find an incorrect id directly ahead of a correct one and swap.
                let base = auc_cr(&recall_curve(&perm, &corrupted).unwrap());
                if let Some(i) = (0..perm.len() - 1)
                    .find(|&i| !corrupted.contains(&perm[i]) && corrupted.contains(&perm[i + 1]))
                {
                    let mut better = perm.clone();
                    better.swap(i, i + 1);
                    let auc = auc_cr(&recall_curve(&better, &corrupted).unwrap());
                    if i < corrupted.len() {
                        prop_assert!(auc > base);
                    } else {
                        prop_assert!(auc >= base);
                    }
                }
            }
        }
    }
}
