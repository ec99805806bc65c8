mod workspace;

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rain_core::bench::{
    ambiguity_sweep, appendix_a_experiment, appendix_c_experiment, brute_force_min_fix, MetricSeries, Problem,
    SweepConfig,
};
use rain_core::orchestrator::{debug, prepare_context, DebugError, Method};
use rain_core::twostep::TwoStepError;

use workspace::{bench_config, read_ranking, Workspace};

#[derive(Parser)]
#[command(name = "rain", version, about = "Debug training data through complaints about query results")]
struct Cli {
    /// Workspace directory.
    #[arg(long, global = true, default_value = ".")]
    workspace: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one query and print its result.
    RunQuery {
        /// Query id (file stem under queries/).
        name: String,
    },
    /// Rank and remove training records until the complaints hold.
    Debug(DebugArgs),
    /// Run a benchmark suite: metrics, oracle, appendix_a, appendix_c or
    /// ambiguity_sweep.
    Bench {
        suite: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write recall curves as whitespace-separated columns.
        #[arg(long)]
        gnuplot: bool,
    },
}

#[derive(clap::Args)]
struct DebugArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    /// Records removed per iteration.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_removals: Option<usize>,
    /// CG residual tolerance.
    #[arg(long)]
    cg_tol: Option<f64>,
    /// ILP time budget in seconds.
    #[arg(long)]
    ilp_budget: Option<f64>,
    /// Exact probability for OR over rows that are not independent.
    #[arg(long)]
    exact_or: bool,
}

const SUITES: [&str; 5] = ["metrics", "oracle", "appendix_a", "appendix_c", "ambiguity_sweep"];

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    let ws = Workspace::new(&cli.workspace);
    let result = match cli.command {
        Command::RunQuery { name } => run_query(&ws, &name),
        Command::Debug(args) => run_debug(&ws, &args),
        Command::Bench { suite, seed, gnuplot } => run_bench(&ws, &suite, seed, gnuplot),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RAIN_THREADS") {
        let n: usize = v.parse().with_context(|| format!("RAIN_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run_query(ws: &Workspace, name: &str) -> Result<()> {
    let loaded = ws.load()?;
    let q = ws.query(&loaded, name)?;
    let model = ws.model(&loaded, &ws.hyper()?)?;
    let ctx = prepare_context(&model, &loaded.db, std::slice::from_ref(&q), 0)?;
    let result = &ctx.queries[name].result;
    let path = ws.out_dir()?.join(format!("{name}.csv"));
    result.write_csv(fs::File::create(&path)?)?;
    result.write_csv(std::io::stdout().lock())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run_debug(ws: &Workspace, args: &DebugArgs) -> Result<()> {
    let loaded = ws.load()?;
    let mut cfg = ws.session()?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.method {
        cfg.method = m;
    }
    if let Some(k) = args.k {
        cfg.k_per_iteration = k;
    }
    if let Some(m) = args.max_removals {
        cfg.max_removals = m;
    }
    if let Some(t) = args.cg_tol {
        cfg.cg.residual_tol = t;
    }
    if let Some(b) = args.ilp_budget {
        cfg.ilp_budget_secs = b;
    }
    cfg.exact_or |= args.exact_or;
    cfg.validate()?;
    let queries = ws.queries(&loaded, &cfg.queries)?;
    let complaints = ws.complaints()?;
    if complaints.is_empty() {
        bail!("complaints.json holds no complaints");
    }
    let report = match debug(&cfg, &loaded.ts, &loaded.db, &queries, &complaints) {
        Err(DebugError::TwoStep(TwoStepError::Timeout { nodes })) => bail!(
            "ilp timeout after {nodes} nodes ({}s budget); use --method holistic, which needs no ILP, or raise --ilp-budget",
            cfg.ilp_budget_secs
        ),
        r => r?,
    };
    let out = ws.out_dir()?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    report.write_ranking_csv(fs::File::create(out.join("ranking.csv"))?)?;

    let mut stdout = std::io::stdout().lock();
    if report.delta.is_empty() && report.final_satisfied.iter().all(|&s| s) {
        writeln!(stdout, "nothing to fix: every complaint already holds")?;
        return Ok(());
    }
    writeln!(stdout, "method {}", report.method)?;
    for it in &report.iterations {
        let q = it.q_before.map_or("-".to_owned(), |v| format!("{v:.6}"));
        let held = it.satisfied.iter().filter(|&&s| s).count();
        writeln!(
            stdout,
            "iteration {}: q {q}, {held}/{} complaints hold, removed {}",
            it.iteration,
            it.satisfied.len(),
            it.removed.len()
        )?;
    }
    writeln!(
        stdout,
        "{} records removed; complaints {}",
        report.delta.len(),
        if report.resolved { "resolved" } else { "not resolved" }
    )?;
    writeln!(stdout, "wrote {} and {}", out.join("report.json").display(), out.join("ranking.csv").display())?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AppendixABench {
    n: Vec<usize>,
    m: usize,
    k: usize,
    draws: usize,
    seed: u64,
}

impl Default for AppendixABench {
    fn default() -> Self {
        Self {
            n: vec![10, 20, 40, 80],
            m: 1,
            k: 1,
            draws: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AppendixCBench {
    corrupted: usize,
    clean: usize,
    seed: u64,
}

impl Default for AppendixCBench {
    fn default() -> Self {
        Self {
            corrupted: 200,
            clean: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepBench {
    seeds: Vec<u64>,
    alphas: Vec<f64>,
    scenario: SweepConfig,
}

impl Default for SweepBench {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            alphas: vec![0.1, 0.8],
            scenario: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OracleBench {
    max_subset_size: usize,
    budget_secs: f64,
}

impl Default for OracleBench {
    fn default() -> Self {
        Self {
            max_subset_size: 2,
            budget_secs: 600.0,
        }
    }
}

#[derive(Serialize)]
struct SweepSummary {
    alpha: f64,
    method: Method,
    mean_auc: f64,
    seeds: usize,
}

fn write_json<T: Serialize>(ws: &Workspace, name: &str, value: &T) -> Result<PathBuf> {
    let path = ws.out_dir()?.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)?)?;
    Ok(path)
}

fn run_bench(ws: &Workspace, suite: &str, seed: Option<u64>, gnuplot: bool) -> Result<()> {
    let written = match suite {
        "metrics" => {
            let ranking = read_ranking(&ws.path("bench/ranking.csv"))?;
            let path = ws.path("bench/corrupted.json");
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let corrupted: HashSet<i64> = serde_json::from_str::<Vec<i64>>(&text)
                .with_context(|| format!("{} must be a list of record ids", path.display()))?
                .into_iter()
                .collect();
            let series = MetricSeries::from_ranking(&ranking, &corrupted)?;
            let out = ws.out_dir()?;
            series.write_csv(fs::File::create(out.join("metrics.csv"))?)?;
            let mut written = vec![out.join("metrics.csv"), write_json(ws, "metrics.json", &series)?];
            if gnuplot {
                series.write_gnuplot(fs::File::create(out.join("metrics.dat"))?)?;
                written.push(out.join("metrics.dat"));
            }
            println!("AUC_CR {:.4} over K = {}", series.auc, series.recalls.len());
            written
        }
        "oracle" => {
            let cfg: OracleBench = bench_config(ws, "oracle")?;
            let loaded = ws.load()?;
            let session = ws.session()?;
            let problem = Problem {
                queries: ws.queries(&loaded, &session.queries)?,
                complaints: ws.complaints()?,
                ts: loaded.ts,
                db: loaded.db,
                hyper: session.hyper,
            };
            let sets = brute_force_min_fix(&problem, cfg.max_subset_size, Duration::from_secs_f64(cfg.budget_secs))?;
            println!("{} minimal deletion set(s) of size {}", sets.len(), sets[0].len());
            vec![write_json(ws, "oracle.json", &sets)?]
        }
        "appendix_a" => {
            let mut cfg: AppendixABench = bench_config(ws, "appendix_a")?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            let results = cfg
                .n
                .iter()
                .map(|&n| appendix_a_experiment(n, cfg.m, cfg.k, cfg.draws, cfg.seed))
                .collect::<Result<Vec<_>, _>>()?;
            for r in &results {
                println!(
                    "n {:>4}: nonzero-score frequency {:.3} (exact {:.4} over {} minimal solutions)",
                    r.n, r.empirical_frequency, r.exact_fraction, r.minimal_solutions
                );
            }
            vec![write_json(ws, "appendix_a.json", &results)?]
        }
        "appendix_c" => {
            let mut cfg: AppendixCBench = bench_config(ws, "appendix_c")?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            let r = appendix_c_experiment(cfg.corrupted, cfg.clean, cfg.seed)?;
            println!(
                "corrupted loss <= {:.2e}, self-influence >= {:.2e}, complaint scores separate: {}",
                r.max_corrupted_loss, r.min_corrupted_self_influence, r.separated
            );
            vec![write_json(ws, "appendix_c.json", &r)?]
        }
        "ambiguity_sweep" => {
            let mut cfg: SweepBench = bench_config(ws, "ambiguity_sweep")?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let rows = ambiguity_sweep(&cfg.seeds, &cfg.alphas, &cfg.scenario)?;
            let mut summary = Vec::new();
            for &alpha in &cfg.alphas {
                for method in [Method::Holistic, Method::Twostep, Method::Loss] {
                    let aucs: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.alpha == alpha && r.method == method)
                        .map(|r| r.auc)
                        .collect();
                    let mean_auc = aucs.iter().sum::<f64>() / aucs.len().max(1) as f64;
                    println!("alpha {alpha:.2} {method:<9} mean AUC_CR {mean_auc:.3}");
                    summary.push(SweepSummary {
                        alpha,
                        method,
                        mean_auc,
                        seeds: aucs.len(),
                    });
                }
            }
            let out = ws.out_dir()?;
            let mut w = csv::Writer::from_path(out.join("ambiguity_sweep.csv"))?;
            w.write_record(["seed", "alpha", "method", "complaints", "auc"])?;
            for r in &rows {
                w.write_record([
                    r.seed.to_string(),
                    r.alpha.to_string(),
                    r.method.to_string(),
                    r.complaints.to_string(),
                    r.auc.to_string(),
                ])?;
            }
            w.flush()?;
            vec![out.join("ambiguity_sweep.csv"), write_json(ws, "ambiguity_sweep.json", &summary)?]
        }
        other => bail!("unknown suite {other:?}\nusage: rain bench <{}>", SUITES.join("|")),
    };
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}
