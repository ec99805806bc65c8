//! Workspace layout:
//!
//! ```text
//! data/schema.json   tables, id/label columns, feature columns
//! data/*.csv         training set and relations
//! queries/NAME.sql   one query per file, id = file stem
//! complaints.json    complaints against query ids
//! session.json       debugging session settings
//! bench/             optional benchmark inputs
//! out/               everything written by the tool
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rain_core::complaint::{load_complaints, Complaint};
use rain_core::model::{train, Hyper, ModelState};
use rain_core::orchestrator::{NamedQuery, SessionConfig};
use rain_core::provenance::Database;
use rain_core::query::{parse_query, validate_plan};
use rain_core::tabular::{load_relation, load_training_set, Column, ColumnKind, TrainingSet};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub file: String,
    #[serde(default = "default_id")]
    pub id: String,
    /// Inferred from the file when absent.
    #[serde(default)]
    pub columns: Option<Vec<Column>>,
    /// Feature columns for this relation when they differ from the
    /// training set's.
    #[serde(default)]
    pub features: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub file: String,
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(default = "default_label")]
    pub label: String,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub columns: Option<Vec<Column>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    /// Every training column other than id and label is a feature.
    pub training: TrainingSpec,
    #[serde(default)]
    pub relations: BTreeMap<String, TableSpec>,
}

fn default_id() -> String {
    "id".into()
}

fn default_label() -> String {
    "label".into()
}

pub struct Workspace {
    pub root: PathBuf,
}

/// Everything needed to run queries.
pub struct Loaded {
    pub ts: TrainingSet,
    pub db: Database,
    pub features: Vec<String>,
    pub overrides: BTreeMap<String, Vec<String>>,
    train_fingerprint: u64,
}

#[derive(Serialize, Deserialize)]
struct CachedModel {
    fingerprint: u64,
    hyper: Hyper,
    model: ModelState,
}

/// Column kinds guessed from every value in the file.
fn infer_columns(path: &Path) -> Result<Vec<Column>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let mut kinds = vec![None::<ColumnKind>; headers.len()];
    for rec in r.records() {
        let rec = rec?;
        for (k, raw) in kinds.iter_mut().zip(rec.iter()) {
            let raw = raw.trim();
            let this = if raw.parse::<i64>().is_ok() {
                ColumnKind::Integer
            } else if raw.parse::<f64>().is_ok() {
                ColumnKind::Real
            } else if raw.eq_ignore_ascii_case("true") || raw.eq_ignore_ascii_case("false") {
                ColumnKind::Boolean
            } else {
                ColumnKind::Text
            };
            *k = Some(match (*k, this) {
                (None, t) => t,
                (Some(a), b) if a == b => a,
                (Some(ColumnKind::Integer), ColumnKind::Real) | (Some(ColumnKind::Real), ColumnKind::Integer) => {
                    ColumnKind::Real
                }
                _ => ColumnKind::Text,
            });
        }
    }
    Ok(headers
        .into_iter()
        .zip(kinds)
        .map(|(name, k)| Column::new(name, k.unwrap_or(ColumnKind::Text)))
        .collect())
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        let out = self.path("out");
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(out)
    }

    pub fn schema(&self) -> Result<Schema> {
        let path = self.path("data/schema.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn load(&self) -> Result<Loaded> {
        let schema = self.schema()?;
        let t = &schema.training;
        let train_path = self.path("data").join(&t.file);
        let columns = match &t.columns {
            Some(c) => c.clone(),
            None => infer_columns(&train_path)?,
        };
        let ts = load_training_set(&train_path, &columns, &t.id, &t.label, t.classes)
            .with_context(|| format!("loading training set {}", train_path.display()))?;
        let features: Vec<String> = columns
            .iter()
            .map(|c| c.name.clone())
            .filter(|n| *n != t.id && *n != t.label)
            .collect();
        let mut relations = Vec::new();
        let mut overrides = BTreeMap::new();
        for (name, spec) in &schema.relations {
            let path = self.path("data").join(&spec.file);
            let columns = match &spec.columns {
                Some(c) => c.clone(),
                None => infer_columns(&path)?,
            };
            relations.push(
                load_relation(&path, name, &columns, &spec.id)
                    .with_context(|| format!("loading relation {name} from {}", path.display()))?,
            );
            if let Some(f) = &spec.features {
                overrides.insert(name.clone(), f.clone());
            }
        }
        let mut h = std::collections::hash_map::DefaultHasher::new();
        fs::read(&train_path)?.hash(&mut h);
        t.label.hash(&mut h);
        t.classes.hash(&mut h);
        Ok(Loaded {
            ts,
            db: Database::new(relations),
            features,
            overrides,
            train_fingerprint: h.finish(),
        })
    }

    pub fn query_ids(&self) -> Result<Vec<String>> {
        let dir = self.path("queries");
        let mut ids = Vec::new();
        if dir.is_dir() {
            for e in fs::read_dir(&dir)? {
                let p = e?.path();
                if p.extension().is_some_and(|x| x == "sql") {
                    if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                        ids.push(stem.to_owned());
                    }
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn query(&self, loaded: &Loaded, id: &str) -> Result<NamedQuery> {
        let path = self.path("queries").join(format!("{id}.sql"));
        if !path.is_file() {
            bail!("query not found: {id} (expected {})", path.display());
        }
        let sql = fs::read_to_string(&path)?;
        let catalog = loaded.db.catalog(&loaded.features, &loaded.overrides);
        let plan = parse_query(&sql)
            .map_err(anyhow::Error::from)
            .and_then(|q| Ok(validate_plan(&q, &catalog, loaded.ts.dim, loaded.ts.classes)?))
            .with_context(|| format!("query {id}"))?;
        Ok(NamedQuery { id: id.into(), plan })
    }

    pub fn queries(&self, loaded: &Loaded, ids: &[String]) -> Result<Vec<NamedQuery>> {
        let ids = if ids.is_empty() { self.query_ids()? } else { ids.to_vec() };
        ids.iter().map(|id| self.query(loaded, id)).collect()
    }

    pub fn complaints(&self) -> Result<Vec<Complaint>> {
        let path = self.path("complaints.json");
        if !path.is_file() {
            bail!("no complaints: {} does not exist", path.display());
        }
        Ok(load_complaints(&path)?)
    }

    pub fn session(&self) -> Result<SessionConfig> {
        let path = self.path("session.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Session settings for commands that only need a model.
    pub fn hyper(&self) -> Result<Hyper> {
        let path = self.path("session.json");
        if !path.is_file() {
            return Ok(Hyper::default());
        }
        #[derive(Deserialize)]
        struct Partial {
            #[serde(default)]
            hyper: Hyper,
        }
        let text = fs::read_to_string(&path)?;
        let p: Partial = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(p.hyper)
    }

    /// Loads `out/model.json` when it matches the data and settings, else
    /// trains and caches.
    pub fn model(&self, loaded: &Loaded, hyper: &Hyper) -> Result<ModelState> {
        let path = self.out_dir()?.join("model.json");
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(c) = serde_json::from_str::<CachedModel>(&text) {
                if c.fingerprint == loaded.train_fingerprint && c.hyper == *hyper {
                    return Ok(c.model);
                }
            }
        }
        let model = train(&loaded.ts, hyper, None)?;
        if !model.converged {
            bail!("training did not converge (gradient norm {:e})", model.grad_norm);
        }
        let cached = CachedModel {
            fingerprint: loaded.train_fingerprint,
            hyper: *hyper,
            model,
        };
        fs::write(&path, serde_json::to_string(&cached)?)?;
        Ok(cached.model)
    }
}

/// Reads `bench/NAME.json` into `T`, or the default when absent.
pub fn bench_config<T: for<'de> Deserialize<'de> + Default>(ws: &Workspace, name: &str) -> Result<T> {
    let path = ws.path("bench").join(format!("{name}.json"));
    if !path.is_file() {
        return Ok(T::default());
    }
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Record ids in rank order from a CSV with a `record_id` column.
pub fn read_ranking(path: &Path) -> Result<Vec<i64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "record_id")
        .with_context(|| format!("{} has no record_id column", path.display()))?;
    let mut rows: Vec<(usize, i64)> = Vec::new();
    let rank_col = r.headers()?.iter().position(|h| h == "rank");
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let id = rec[col].trim().parse().with_context(|| format!("bad record id {:?}", &rec[col]))?;
        let rank = match rank_col {
            Some(c) => rec[c].trim().parse().unwrap_or(i),
            None => i,
        };
        rows.push((rank, id));
    }
    rows.sort_by_key(|r| r.0);
    let mut seen = HashSet::new();
    Ok(rows.into_iter().filter(|(_, id)| seen.insert(*id)).map(|r| r.1).collect())
}
