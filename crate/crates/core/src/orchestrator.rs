//! The train-rank-fix loop and the choice between the two complaint
//! encodings.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::complaint::{Complaint, ComplaintError, DebugContext, QueryState};
use crate::holistic::{encode_complaints, HolisticError, RelaxOptions};
use crate::influence::{
    loss_scores, score_training_records, self_influence_scores, CgSettings, InfluenceError, InfluenceScores, QFunction,
};
use crate::model::{train, Hyper, ModelError, ModelState};
use crate::provenance::{build_views, execute_debug, Database, ExecError, ResultSet};
use crate::query::CheckedPlan;
use crate::tabular::TrainingSet;
use crate::twostep::{
    ambiguity_count, build_ilp, encode_mispredictions, solve_ilp, EncodeMode, SolveOptions, Strategy, TwoStepError,
};

#[derive(Debug, Error)]
pub enum DebugError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training did not converge (gradient norm {grad_norm:e})")]
    NotConverged { grad_norm: f64 },
    #[error(transparent)]
    Influence(#[from] InfluenceError),
    #[error(transparent)]
    Holistic(#[from] HolisticError),
    #[error(transparent)]
    TwoStep(#[from] TwoStepError),
    #[error(transparent)]
    Complaint(#[from] ComplaintError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("cannot remove {k} records from {remaining}")]
    TooManyRemovals { k: usize, remaining: usize },
    #[error("invalid session: {0}")]
    Config(String),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Holistic,
    #[serde(alias = "two_step")]
    Twostep,
    Loss,
    Infloss,
    Auto,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Holistic => "holistic",
            Method::Twostep => "twostep",
            Method::Loss => "loss",
            Method::Infloss => "infloss",
            Method::Auto => "auto",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "holistic" => Ok(Method::Holistic),
            "twostep" | "two_step" => Ok(Method::Twostep),
            "loss" => Ok(Method::Loss),
            "infloss" => Ok(Method::Infloss),
            "auto" => Ok(Method::Auto),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

fn default_k() -> usize {
    10
}

fn default_true() -> bool {
    true
}

fn default_budget() -> f64 {
    60.0
}

fn default_cap() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub method: Method,
    #[serde(default = "default_k")]
    pub k_per_iteration: usize,
    pub max_removals: usize,
    /// Query ids to load; empty means every query in the workspace.
    #[serde(default)]
    pub queries: Vec<String>,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default)]
    pub cg: CgSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    /// Stop once every complaint holds concretely. Benchmarks that need a
    /// ranking of fixed length turn this off.
    #[serde(default = "default_true")]
    pub stop_when_satisfied: bool,
    #[serde(default)]
    pub exact_or: bool,
    #[serde(default = "default_budget")]
    pub ilp_budget_secs: f64,
    #[serde(default = "default_strategy")]
    pub ilp_strategy: Strategy,
    #[serde(default = "default_encode")]
    pub encode_mode: EncodeMode,
    /// Enumeration cap used by the automatic chooser.
    #[serde(default = "default_cap")]
    pub ambiguity_cap: usize,
}

fn default_strategy() -> Strategy {
    Strategy::Deterministic
}

fn default_encode() -> EncodeMode {
    EncodeMode::MarkedOnly
}

impl SessionConfig {
    pub fn new(method: Method, k_per_iteration: usize, max_removals: usize) -> Self {
        Self {
            method,
            k_per_iteration,
            max_removals,
            queries: Vec::new(),
            hyper: Hyper::default(),
            cg: CgSettings::default(),
            seed: 0,
            warm_start: true,
            stop_when_satisfied: true,
            exact_or: false,
            ilp_budget_secs: default_budget(),
            ilp_strategy: Strategy::Deterministic,
            encode_mode: EncodeMode::MarkedOnly,
            ambiguity_cap: default_cap(),
        }
    }

    pub fn validate(&self) -> Result<(), DebugError> {
        if self.k_per_iteration == 0 {
            return Err(DebugError::Config("k_per_iteration must be at least 1".into()));
        }
        if !(self.ilp_budget_secs > 0.0) {
            return Err(DebugError::Config("ilp_budget_secs must be positive".into()));
        }
        if self.ambiguity_cap < 2 {
            return Err(DebugError::Config("ambiguity_cap must be at least 2".into()));
        }
        Ok(())
    }

    fn solve_options(&self, iteration: usize) -> SolveOptions {
        SolveOptions {
            strategy: self.ilp_strategy,
            seed: self.seed.wrapping_add(iteration as u64),
            time_budget: self.budget(),
            ..SolveOptions::default()
        }
    }

    fn budget(&self) -> Duration {
        Duration::from_secs_f64(self.ilp_budget_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedQuery {
    pub id: String,
    pub plan: CheckedPlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedRecord {
    pub record_id: i64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_ms: f64,
    pub encode_ms: f64,
    pub rank_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlpSummary {
    pub rows: usize,
    pub objective: usize,
    pub marked: usize,
    pub unique: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// Removed records in rank order.
    pub removed: Vec<RankedRecord>,
    pub q_before: Option<f64>,
    /// `q` of this iteration evaluated after retraining without the removals.
    pub q_after: Option<f64>,
    pub results: BTreeMap<String, ResultSet>,
    pub satisfied: Vec<bool>,
    pub ilp: Option<IlpSummary>,
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebugReport {
    pub method: Method,
    pub iterations: Vec<IterationReport>,
    /// Every removed record id in removal order.
    pub delta: Vec<i64>,
    pub final_results: BTreeMap<String, ResultSet>,
    pub final_satisfied: Vec<bool>,
    pub resolved: bool,
    pub train_converged: bool,
}

impl DebugReport {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    /// `iteration,rank,record_id,score` with ranks counted across iterations.
    pub fn write_ranking_csv<W: Write>(&self, out: W) -> Result<(), DebugError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "rank", "record_id", "score"])?;
        let mut rank = 0;
        for it in &self.iterations {
            for r in &it.removed {
                rank += 1;
                w.write_record([
                    it.iteration.to_string(),
                    rank.to_string(),
                    r.record_id.to_string(),
                    format!("{:e}", r.score),
                ])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Trains, builds the views and runs every query in debug mode.
pub fn prepare_context(
    m: &ModelState,
    db: &Database,
    queries: &[NamedQuery],
    version: u64,
) -> Result<DebugContext, DebugError> {
    let plans: Vec<&CheckedPlan> = queries.iter().map(|q| &q.plan).collect();
    let views = build_views(m, db, &plans, version)?;
    let mut states = BTreeMap::new();
    for q in queries {
        let (result, prov) = execute_debug(&q.plan, db, &views)?;
        let default_relation = q.plan.predicted_relations().into_iter().next().map(|(r, _)| r);
        states.insert(
            q.id.clone(),
            QueryState {
                result,
                prov,
                default_relation,
            },
        );
    }
    Ok(DebugContext { queries: states, views })
}

/// TwoStep when the complaints admit exactly one minimal fix of the
/// predictions, Holistic otherwise.
pub fn choose_method(cs: &[Complaint], ctx: &DebugContext, cap: usize, budget: Duration) -> Method {
    let unique = build_ilp(cs, ctx)
        .and_then(|ilp| ambiguity_count(&ilp, cap, budget))
        .is_ok_and(|n| n.is_unique());
    if unique {
        Method::Twostep
    } else {
        Method::Holistic
    }
}

/// Removes the first `k` of an already ranked list from `ts`.
pub fn rank_and_remove(
    ts: &mut TrainingSet,
    ranked: &[(i64, f64)],
    k: usize,
) -> Result<Vec<RankedRecord>, DebugError> {
    if k > ts.len() || k > ranked.len() {
        return Err(DebugError::TooManyRemovals {
            k,
            remaining: ts.len().min(ranked.len()),
        });
    }
    let removed: Vec<RankedRecord> = ranked[..k]
        .iter()
        .map(|&(record_id, score)| RankedRecord { record_id, score })
        .collect();
    let ids: HashSet<i64> = removed.iter().map(|r| r.record_id).collect();
    *ts = ts.without(&ids);
    Ok(removed)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn results(ctx: &DebugContext) -> BTreeMap<String, ResultSet> {
    ctx.queries.iter().map(|(k, v)| (k.clone(), v.result.clone())).collect()
}

fn satisfied(ctx: &DebugContext, cs: &[Complaint]) -> Result<Vec<bool>, DebugError> {
    cs.iter().map(|c| ctx.is_satisfied(c).map_err(Into::into)).collect()
}

/// Scores the working set; the result is ordered best-to-remove first.
fn rank(
    method: Method,
    cfg: &SessionConfig,
    m: &ModelState,
    ts: &TrainingSet,
    q: Option<&dyn QFunction>,
) -> Result<Vec<(i64, f64)>, DebugError> {
    let scores: InfluenceScores = match method {
        Method::Loss => return Ok(loss_scores(m, ts)?.ranked_descending()),
        Method::Infloss => return Ok(self_influence_scores(m, ts, &cfg.cg)?.ranked_ascending()),
        _ => score_training_records(m, ts, q.expect("complaint methods encode q"), &cfg.cg)?,
    };
    Ok(scores.ranked_descending())
}

/// Runs train-rank-fix until the complaints hold or `max_removals` records
/// are gone.
pub fn debug(
    cfg: &SessionConfig,
    ts: &TrainingSet,
    db: &Database,
    queries: &[NamedQuery],
    complaints: &[Complaint],
) -> Result<DebugReport, DebugError> {
    cfg.validate()?;
    for c in complaints {
        c.check()?;
    }
    let mut working = ts.clone();
    let mut model: Option<ModelState> = None;
    let mut method = cfg.method;
    let mut iterations: Vec<IterationReport> = Vec::new();
    let mut delta = Vec::new();
    let mut prev_q: Option<Box<dyn QFunction>> = None;
    let opts = RelaxOptions { exact_or: cfg.exact_or };

    loop {
        let iteration = iterations.len();
        let t0 = Instant::now();
        let warm = if cfg.warm_start { model.as_ref() } else { None };
        let m = train(&working, &cfg.hyper, warm)?;
        if !m.converged {
            return Err(DebugError::NotConverged { grad_norm: m.grad_norm });
        }
        let train_time = t0.elapsed();
        let ctx = prepare_context(&m, db, queries, iteration as u64)?;
        let sat = satisfied(&ctx, complaints)?;
        if let (Some(q), Some(last)) = (prev_q.take(), iterations.last_mut()) {
            last.q_after = Some(q.value(&m));
        }
        let resolved = sat.iter().all(|&s| s);
        let budget_left = cfg.max_removals.saturating_sub(delta.len());
        let k = cfg.k_per_iteration.min(budget_left).min(working.len().saturating_sub(1));
        if (resolved && cfg.stop_when_satisfied) || k == 0 {
            if method == Method::Auto {
                method = choose_method(complaints, &ctx, cfg.ambiguity_cap, cfg.budget());
            }
            return Ok(DebugReport {
                method,
                iterations,
                delta,
                final_results: results(&ctx),
                final_satisfied: sat,
                resolved,
                train_converged: m.converged,
            });
        }
        if method == Method::Auto {
            method = choose_method(complaints, &ctx, cfg.ambiguity_cap, cfg.budget());
        }

        let t1 = Instant::now();
        let mut ilp_summary = None;
        let q: Option<Box<dyn QFunction>> = match method {
            Method::Holistic => Some(Box::new(encode_complaints(complaints, &ctx, opts)?)),
            Method::Twostep => {
                let ilp = build_ilp(complaints, &ctx)?;
                let a = solve_ilp(&ilp, &cfg.solve_options(iteration))?;
                ilp_summary = Some(IlpSummary {
                    rows: a.rows.len(),
                    objective: a.objective,
                    marked: a.marked().count(),
                    unique: a.unique,
                });
                Some(Box::new(encode_mispredictions(&a, &ctx.views, cfg.encode_mode)?))
            }
            Method::Loss | Method::Infloss => None,
            Method::Auto => unreachable!("resolved above"),
        };
        let encode_time = t1.elapsed();

        let t2 = Instant::now();
        let q_before = q.as_ref().map(|q| q.value(&m));
        let ranked = rank(method, cfg, &m, &working, q.as_deref())?;
        let removed = rank_and_remove(&mut working, &ranked, k)?;
        let rank_time = t2.elapsed();

        delta.extend(removed.iter().map(|r| r.record_id));
        iterations.push(IterationReport {
            iteration,
            removed,
            q_before,
            q_after: None,
            results: results(&ctx),
            satisfied: sat,
            ilp: ilp_summary,
            timing: Timing {
                train_ms: ms(train_time),
                encode_ms: ms(encode_time),
                rank_ms: ms(rank_time),
            },
        });
        prev_q = q;
        model = Some(m);
    }
}
