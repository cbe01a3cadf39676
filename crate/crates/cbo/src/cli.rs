//! Command-line interface: run optimizations from config files, re-derive
//! best-so-far traces from saved histories, and run the benchmark suite.

use crate::config::{parse_history, write_history, HistoryRecord, ProblemConfigFile};
use crate::evaluator::{BuiltinEvaluator, Fidelity};
use crate::orchestrator::{
    run_coupled, run_fusion_baseline, run_plain_baseline, RunConfig, RunResult,
};
use crate::stats::{iqr, median};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "cbo", version, about = "Multi-fidelity Bayesian optimization")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Coupled,
    Plain,
    Fusion,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Coupled => "coupled",
            Method::Plain => "plain",
            Method::Fusion => "fusion",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an optimization described by a problem config file.
    Run {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "coupled")]
        method: Method,
        /// Expensive-fidelity cadence override (one expensive evaluation
        /// every K cheap iterations).
        #[arg(long)]
        interval: Option<usize>,
        #[arg(long)]
        n_pre: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for history.jsonl and summary.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Emit a best-so-far CSV from a saved history.
    Report {
        history: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the builtin benchmark suite and summarize per-method results.
    Benchmark {
        /// bowl, ota, ldo, or all
        suite: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn speed_factor() -> f64 {
    std::env::var("CBO_SPEED_FACTOR")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.0)
}

#[derive(Serialize)]
struct Summary {
    method: &'static str,
    seed: u64,
    n_pre: usize,
    interval: usize,
    pre_evaluations: usize,
    post_evaluations: usize,
    incumbent_config: Option<std::collections::BTreeMap<String, f64>>,
    incumbent_effective_fom: Option<f64>,
    wall_ms: u64,
}

fn execute(cfg: &RunConfig, method: Method, evaluator: &dyn crate::evaluator::Evaluator) -> Result<RunResult> {
    let result = match method {
        Method::Coupled => run_coupled(cfg, evaluator),
        Method::Plain => run_plain_baseline(cfg, evaluator),
        Method::Fusion => run_fusion_baseline(cfg, evaluator, cfg.expensive_budget() / 2),
    };
    result.map_err(|e| anyhow::anyhow!("{e}"))
}

pub fn cmd_run(
    config_path: &Path,
    method: Method,
    interval: Option<usize>,
    n_pre: Option<usize>,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<()> {
    if interval == Some(0) {
        bail!("--interval must be at least 1");
    }
    let file = ProblemConfigFile::load(config_path.to_str().context("config path is not UTF-8")?)?;
    let (mut cfg, evaluator) = file.build(speed_factor())?;
    if let Some(k) = interval {
        cfg.interval = k;
    }
    if let Some(n) = n_pre {
        cfg.n_pre = n;
        cfg.n_init = cfg.n_init.min(n);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }

    let result = execute(&cfg, method, evaluator.as_ref())?;

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let records: Vec<HistoryRecord> = result
        .history
        .iter()
        .map(|o| HistoryRecord::from_observation(o, &cfg.space))
        .collect();
    std::fs::write(out_dir.join("history.jsonl"), write_history(&records))?;

    let (pre, post) = fidelity_counts(&result);
    let summary = Summary {
        method: method.name(),
        seed: cfg.seed,
        n_pre: cfg.n_pre,
        interval: cfg.interval,
        pre_evaluations: pre,
        post_evaluations: post,
        incumbent_config: result.incumbent.as_ref().map(|(c, _)| {
            cfg.space
                .specs()
                .iter()
                .zip(&c.values)
                .map(|(s, v)| (s.name.clone(), *v))
                .collect()
        }),
        incumbent_effective_fom: result.incumbent.as_ref().map(|(_, f)| *f),
        wall_ms: result.wall_ms,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "{} run complete: {pre} cheap + {post} expensive evaluations, incumbent FOM {}",
        method.name(),
        summary
            .incumbent_effective_fom
            .map_or("none".to_string(), |f| format!("{f:.4}")),
    );
    Ok(())
}

fn fidelity_counts(result: &RunResult) -> (usize, usize) {
    let pre = result
        .history
        .iter()
        .filter(|o| o.fidelity == Fidelity::Pre)
        .count();
    (pre, result.history.len() - pre)
}

pub fn report_csv(records: &[HistoryRecord]) -> String {
    let mut best_pre: Option<f64> = None;
    let mut best_post: Option<f64> = None;
    let mut out = String::from("iter,fidelity,best_pre_so_far,best_post_so_far\n");
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for r in records {
        if let Some(eff) = r.effective {
            let slot = match r.fidelity {
                Fidelity::Pre => &mut best_pre,
                Fidelity::Post => &mut best_post,
            };
            *slot = Some(slot.map_or(eff, |b: f64| b.max(eff)));
        }
        writeln!(
            out,
            "{},{},{},{}",
            r.iter,
            r.fidelity,
            cell(best_pre),
            cell(best_post)
        )
        .unwrap();
    }
    out
}

pub fn cmd_report(history_path: &Path, out_csv: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(history_path)
        .with_context(|| format!("cannot read {}", history_path.display()))?;
    let records = parse_history(&text)?;
    let csv = report_csv(&records);
    match out_csv {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

struct BenchmarkRow {
    benchmark: &'static str,
    method: String,
    n_pre: usize,
    n_post: usize,
    median_fom: f64,
    iqr_fom: f64,
}

fn suite_benchmarks(suite: &str) -> Result<Vec<&'static str>> {
    Ok(match suite {
        "bowl" => vec!["two_fidelity_bowl"],
        "ota" => vec!["synthetic_ota"],
        "ldo" => vec!["synthetic_ldo"],
        "all" => vec!["two_fidelity_bowl", "synthetic_ota", "synthetic_ldo"],
        other => bail!("unknown suite `{other}` (expected bowl, ota, ldo, or all)"),
    })
}

pub fn cmd_benchmark(suite: &str, seeds: u64, out_csv: Option<&Path>) -> Result<()> {
    let names = suite_benchmarks(suite)?;
    let mut rows = Vec::new();
    for name in names {
        let def = crate::evaluator::builtin(name).expect("suite names are registered");
        let base = RunConfig::new(def.space.clone(), def.fom.clone());
        let ev = BuiltinEvaluator::new(name).expect("suite names are registered");

        let methods: Vec<(String, Method, usize)> = vec![
            ("coupled".into(), Method::Coupled, 4),
            ("coupled".into(), Method::Coupled, 2),
            ("plain".into(), Method::Plain, base.interval),
            ("fusion".into(), Method::Fusion, base.interval),
        ];
        for (label, method, interval) in methods {
            let mut finals = Vec::with_capacity(seeds as usize);
            let mut post_total = 0;
            for seed in 0..seeds {
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.interval = interval;
                let result = execute(&cfg, method, &ev)?;
                let (_, post) = fidelity_counts(&result);
                post_total = post;
                finals.push(result.incumbent.map(|(_, f)| f).unwrap_or(f64::NAN));
            }
            let method_label = if method == Method::Coupled {
                format!("{label}(interval={interval})")
            } else {
                label
            };
            rows.push(BenchmarkRow {
                benchmark: name,
                method: method_label,
                n_pre: base.n_pre,
                n_post: post_total,
                median_fom: median(&finals),
                iqr_fom: iqr(&finals),
            });
        }
    }

    let mut csv = String::from("benchmark,method,n_pre,n_post,median_fom,iqr_fom\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{:.6},{:.6}",
            r.benchmark, r.method, r.n_pre, r.n_post, r.median_fom, r.iqr_fom
        )
        .unwrap();
    }
    match out_csv {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            method,
            interval,
            n_pre,
            seed,
            out,
        } => cmd_run(&config, method, interval, n_pre, seed, &out),
        Command::Report { history, out } => cmd_report(&history, out.as_deref()),
        Command::Benchmark { suite, seeds, out } => cmd_benchmark(&suite, seeds, out.as_deref()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::ObsStatus;
    use std::collections::BTreeMap;

    fn record(iter: usize, fidelity: Fidelity, effective: f64) -> HistoryRecord {
        HistoryRecord {
            iter,
            fidelity,
            config: BTreeMap::new(),
            metrics: None,
            fom: Some(effective),
            violation: Some(0.0),
            effective: Some(effective),
            status: ObsStatus::Ok,
            duration_ms: 0,
        }
    }

    #[test]
    fn report_single_post_record() {
        let csv = report_csv(&[record(1, Fidelity::Post, 4.5)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iter,fidelity,best_pre_so_far,best_post_so_far");
        assert_eq!(lines[1], "1,post,,4.5");
    }

    #[test]
    fn report_traces_match_running_max() {
        let records = vec![
            record(1, Fidelity::Pre, 1.0),
            record(2, Fidelity::Pre, 3.0),
            record(2, Fidelity::Post, 2.0),
            record(3, Fidelity::Pre, 2.5),
            record(4, Fidelity::Post, 5.0),
        ];
        let csv = report_csv(&records);
        // independent running-max recomputation over the same records
        let mut bp = f64::NEG_INFINITY;
        let mut bq = f64::NEG_INFINITY;
        for (line, r) in csv.lines().skip(1).zip(&records) {
            let eff = r.effective.unwrap();
            match r.fidelity {
                Fidelity::Pre => bp = bp.max(eff),
                Fidelity::Post => bq = bq.max(eff),
            }
            let cols: Vec<&str> = line.split(',').collect();
            if bp.is_finite() {
                assert_eq!(cols[2].parse::<f64>().unwrap(), bp);
            }
            if bq.is_finite() {
                assert_eq!(cols[3].parse::<f64>().unwrap(), bq);
            } else {
                assert!(cols[3].is_empty());
            }
        }
        // best_post_so_far column is nondecreasing where present
        let mut prev = f64::NEG_INFINITY;
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if let Ok(v) = cols[3].parse::<f64>() {
                assert!(v >= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(suite_benchmarks("nope").is_err());
        assert_eq!(suite_benchmarks("all").unwrap().len(), 3);
    }
}
