//! Batch driver for the two-phase alerting pipeline.
//!
//! Exit codes: 0 success, 1 partial per-record failures, 2
//! configuration or IO failure.

mod config;
mod io;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mmd::core::{fill_missing, validate_series, MetricSeries, RawRecord};
use mmd::decompose::Decomposer;
use mmd::detect::detect_last;
use mmd::eval::{
    self, bench_throughput, gen_corpus, CorpusSpec, DetectorChoice, EvalPoint, GridPoint,
    MetricsReport, NoiseKind,
};
use mmd::frequency::PeriodCache;
use mmd::rank::{fit_weights, FeedbackRecord};
use mmd::retrieve::{run_retrieval, AlertCandidate};

use config::PipelineConfig;
use io::{AlertRecord, VerdictRecord};

#[derive(Parser)]
#[command(name = "mmd", about = "Two-phase metric anomaly alerting pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DecomposerArg {
    Mmd,
    Classical,
}

impl From<DecomposerArg> for Decomposer {
    fn from(d: DecomposerArg) -> Self {
        match d {
            DecomposerArg::Mmd => Decomposer::Mmd,
            DecomposerArg::Classical => Decomposer::Classical,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Phase one: detect anomalies in every series of the input file.
    Detect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Worker threads; defaults to available CPUs.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Both phases: detect, then rank/filter into at most ten alerts.
    Alert {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Generate a synthetic corpus with injected anomalies.
    Gen {
        #[arg(long)]
        output: PathBuf,
        /// Ground-truth label file (JSON lines) to write alongside.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 164)]
        n_series: usize,
        #[arg(long, default_value_t = 212)]
        length: usize,
        #[arg(long, default_value_t = 7)]
        period: usize,
        #[arg(long, default_value_t = 0.01)]
        anomaly_rate: f64,
        #[arg(long, default_value_t = 15.0)]
        anomaly_magnitude: f64,
        #[arg(long, default_value_t = 1.0)]
        noise_sigma: f64,
    },
    /// Score a detector against labels on a corpus.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum, default_value_t = DecomposerArg::Mmd)]
        decomposer: DecomposerArg,
        #[arg(long, default_value_t = 1)]
        persist_days: usize,
        #[arg(long, default_value_t = 2.0)]
        beta: f64,
    },
    /// Grid-search detector parameters on a train split, report held-out.
    Tune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Last date (inclusive) of the training split.
        #[arg(long)]
        train_end: NaiveDate,
        /// Comma-separated p_anom grid.
        #[arg(long, default_value = "0.005,0.01,0.02,0.05", value_delimiter = ',')]
        p_grid: Vec<f64>,
        /// Comma-separated persist-days grid.
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        persist_grid: Vec<usize>,
        #[arg(long, value_enum, default_value_t = DecomposerArg::Mmd)]
        decomposer: DecomposerArg,
        #[arg(long, default_value_t = 2.0)]
        beta: f64,
    },
    /// Compare decomposer throughput, single-threaded.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Must be 1; benchmarking is single-threaded by contract.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Fit ranking weights from alert feedback.
    FitWeights {
        #[arg(long)]
        feedback: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        reg: f64,
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Detect { config, input, output, workers } => {
            cmd_detect(config.as_deref(), &input, &output, workers)
        }
        Command::Alert { config, input, output, workers } => {
            cmd_alert(config.as_deref(), &input, &output, workers)
        }
        Command::Gen {
            output,
            labels,
            seed,
            n_series,
            length,
            period,
            anomaly_rate,
            anomaly_magnitude,
            noise_sigma,
        } => cmd_gen(
            &output,
            &labels,
            CorpusSpec {
                n_series,
                length,
                period,
                anomaly_rate,
                anomaly_magnitude,
                noise: NoiseKind::Gaussian { sigma: noise_sigma },
                seed,
                ..Default::default()
            },
        ),
        Command::Eval { config, input, labels, decomposer, persist_days, beta } => {
            cmd_eval(config.as_deref(), &input, &labels, decomposer.into(), persist_days, beta)
        }
        Command::Tune { config, input, labels, train_end, p_grid, persist_grid, decomposer, beta } => {
            cmd_tune(
                config.as_deref(),
                &input,
                &labels,
                train_end,
                &p_grid,
                &persist_grid,
                decomposer.into(),
                beta,
            )
        }
        Command::Bench { config, input, reps, workers } => {
            anyhow::ensure!(workers == 1, "bench requires --workers 1");
            cmd_bench(config.as_deref(), &input, reps)
        }
        Command::FitWeights { feedback, reg, output } => cmd_fit_weights(&feedback, reg, &output),
    }
}

fn thread_pool(workers: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    builder.build().context("building worker pool")
}

/// One series through phase one.
struct PhaseOneResult {
    series: MetricSeries,
    period_w: usize,
    verdict: mmd::core::AnomalyVerdict,
}

fn run_phase_one(
    groups: BTreeMap<String, Vec<RawRecord>>,
    cfg: &PipelineConfig,
    cache: &PeriodCache,
    pool: &rayon::ThreadPool,
) -> (Vec<PhaseOneResult>, Vec<(String, String)>) {
    use rayon::prelude::*;
    let groups: Vec<(String, Vec<RawRecord>)> = groups.into_iter().collect();
    let outcomes: Vec<Result<PhaseOneResult, (String, String)>> = pool.install(|| {
        groups
            .par_iter()
            .map(|(identity, records)| {
                let detect_one = || -> anyhow::Result<PhaseOneResult> {
                    let series = validate_series(records)?;
                    let filled = fill_missing(&series)?;
                    let period_w = cache.estimate_cached(&filled, &cfg.frequency)?;
                    let verdict = detect_last(&filled, &cfg.detector, period_w)?;
                    Ok(PhaseOneResult { series: filled, period_w, verdict })
                };
                detect_one().map_err(|e| (identity.clone(), format!("{e:#}")))
            })
            .collect()
    });
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(f) => failures.push(f),
        }
    }
    (results, failures)
}

fn load_input_and_phase_one(
    config: Option<&Path>,
    input: &Path,
    workers: Option<usize>,
) -> anyhow::Result<(PipelineConfig, PeriodCache, Vec<PhaseOneResult>, usize)> {
    let cfg = PipelineConfig::load(config)?;
    let (records, row_errors) = io::read_observations(input)?;
    for e in &row_errors {
        eprintln!("{}:{}: {}", input.display(), e.line, e.message);
    }
    let cache = match &cfg.period_cache_path {
        Some(path) if path.exists() => PeriodCache::load(path)?,
        _ => PeriodCache::new(),
    };
    let pool = thread_pool(workers)?;
    let groups = io::group_by_identity(records);
    let (results, failures) = run_phase_one(groups, &cfg, &cache, &pool);
    for (identity, message) in &failures {
        eprintln!("{identity}: {message}");
    }
    if let Some(path) = &cfg.period_cache_path {
        cache.save(path)?;
    }
    Ok((cfg, cache, results, row_errors.len() + failures.len()))
}

fn cmd_detect(
    config: Option<&Path>,
    input: &Path,
    output: &Path,
    workers: Option<usize>,
) -> anyhow::Result<ExitCode> {
    let (_, _, results, failures) = load_input_and_phase_one(config, input, workers)?;
    let records: Vec<VerdictRecord> = results
        .iter()
        .map(|r| VerdictRecord {
            date: r.series.last_date().expect("nonempty series"),
            priority: r.series.priority,
            period_w: r.period_w,
            verdict: r.verdict.clone(),
        })
        .collect();
    io::write_jsonl(output, &records)?;
    eprintln!("wrote {} verdicts to {}", records.len(), output.display());
    Ok(if failures > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_alert(
    config: Option<&Path>,
    input: &Path,
    output: &Path,
    workers: Option<usize>,
) -> anyhow::Result<ExitCode> {
    let (cfg, _, results, failures) = load_input_and_phase_one(config, input, workers)?;
    let weights = cfg.load_weights()?;
    let history = io::load_history(cfg.history_path.as_deref())?;

    let candidates: Vec<AlertCandidate> = results
        .into_iter()
        .filter(|r| r.verdict.is_anomaly)
        .map(|r| AlertCandidate {
            priority: r.series.priority,
            date: r.series.last_date().expect("nonempty series"),
            window: r.series.trailing_window(cfg.retrieval.corr_window).to_vec(),
            verdict: r.verdict,
        })
        .collect();

    let outcome = run_retrieval(candidates, &weights, &history, &cfg.retrieval);
    let records: Vec<AlertRecord> = outcome.alerts.iter().map(AlertRecord::from_emitted).collect();
    io::write_jsonl(output, &records)?;
    if let Some(path) = &cfg.history_path {
        io::save_history(path, &outcome.history)?;
    }
    eprintln!(
        "emitted {} alerts ({} suppressed) to {}",
        records.len(),
        outcome.suppressed.len(),
        output.display()
    );
    Ok(if failures > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_gen(output: &Path, labels: &Path, spec: CorpusSpec) -> anyhow::Result<ExitCode> {
    let corpus = gen_corpus(&spec);
    let mut rows = String::new();
    let mut label_records = Vec::new();
    for s in &corpus.series {
        let dims = io::format_dimensions(&s.series.dimensions);
        for (t, (date, value)) in s.series.timestamps.iter().zip(&s.series.values).enumerate() {
            rows.push_str(&format!(
                "{},{},{},{},{}\n",
                s.series.metric_id, dims, date, value, s.series.priority
            ));
            label_records.push(mmd::core::LabelRecord {
                metric_id: s.series.metric_id.clone(),
                timestamp: *date,
                labeler_id: "truth".into(),
                is_alert: s.label_at(t),
            });
        }
    }
    std::fs::write(output, rows).with_context(|| format!("writing {}", output.display()))?;
    io::write_jsonl(labels, &label_records)?;
    eprintln!(
        "generated {} series x {} days to {} (labels: {})",
        spec.n_series,
        spec.length,
        output.display(),
        labels.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Load a labeled corpus: gap-filled series with cached periods plus
/// evaluation points mapped from aggregated majority labels (ties at 0.5
/// excluded).
fn load_labeled_corpus(
    config: Option<&Path>,
    input: &Path,
    labels: &Path,
) -> anyhow::Result<(PipelineConfig, Vec<MetricSeries>, Vec<EvalPoint>)> {
    let cfg = PipelineConfig::load(config)?;
    let (records, row_errors) = io::read_observations(input)?;
    anyhow::ensure!(row_errors.is_empty(), "{} malformed input rows", row_errors.len());

    let cache = PeriodCache::new();
    let mut series = Vec::new();
    for (_, group) in io::group_by_identity(records) {
        let validated = validate_series(&group)?;
        let mut filled = fill_missing(&validated)?;
        let w = cache.estimate_cached(&filled, &cfg.frequency)?;
        filled.period_w = Some(w);
        series.push(filled);
    }

    let label_records = io::read_labels(labels)?;
    // viewer count = distinct labelers per metric
    let mut labelers: BTreeMap<String, std::collections::BTreeSet<&str>> = BTreeMap::new();
    for r in &label_records {
        labelers.entry(r.metric_id.clone()).or_default().insert(r.labeler_id.as_str());
    }
    let viewers: BTreeMap<String, usize> =
        labelers.into_iter().map(|(k, set)| (k, set.len())).collect();
    let aggregated = eval::aggregate_labels(&label_records, &viewers)?;

    let mut by_metric: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, s) in series.iter().enumerate() {
        by_metric.entry(&s.metric_id).or_default().push(idx);
    }
    let mut points = Vec::new();
    for label in &aggregated {
        if (label.agreement_ratio - 0.5).abs() < 1e-12 {
            continue; // tie, excluded by the strict majority rule
        }
        let Some(indices) = by_metric.get(label.metric_id.as_str()) else {
            continue;
        };
        for &idx in indices {
            let s = &series[idx];
            let w = s.period_w.unwrap_or(cfg.frequency.default_period);
            let min_history = 3 * w + 1;
            if let Some(t) = s.timestamps.iter().position(|d| *d == label.timestamp) {
                if t >= min_history {
                    points.push(EvalPoint { series_idx: idx, t, label: label.is_alert_majority });
                }
            }
        }
    }
    Ok((cfg, series, points))
}

fn cmd_eval(
    config: Option<&Path>,
    input: &Path,
    labels: &Path,
    decomposer: Decomposer,
    persist_days: usize,
    beta: f64,
) -> anyhow::Result<ExitCode> {
    let (cfg, series, points) = load_labeled_corpus(config, input, labels)?;
    let choice = DetectorChoice { decomposer, detector: cfg.detector.clone(), persist_days };
    let report =
        eval::score_detector(&series, &points, &choice, cfg.frequency.default_period, beta)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct TuneReport {
    best_p_anom: f64,
    best_persist_days: usize,
    train: MetricsReport,
    test: MetricsReport,
}

#[allow(clippy::too_many_arguments)]
fn cmd_tune(
    config: Option<&Path>,
    input: &Path,
    labels: &Path,
    train_end: NaiveDate,
    p_grid: &[f64],
    persist_grid: &[usize],
    decomposer: Decomposer,
    beta: f64,
) -> anyhow::Result<ExitCode> {
    let (cfg, series, points) = load_labeled_corpus(config, input, labels)?;
    let (train, test): (Vec<EvalPoint>, Vec<EvalPoint>) = points
        .into_iter()
        .partition(|p| series[p.series_idx].timestamps[p.t] <= train_end);
    anyhow::ensure!(!train.is_empty(), "no training points before {train_end}");
    anyhow::ensure!(!test.is_empty(), "no test points after {train_end}");

    let mut grid = Vec::new();
    for &p in p_grid {
        for &k in persist_grid {
            grid.push(GridPoint { p_anom: p, persist_days: k });
        }
    }
    let result = eval::grid_search(
        &grid,
        &series,
        &train,
        &test,
        decomposer,
        cfg.frequency.default_period,
        beta,
    )?;
    let report = TuneReport {
        best_p_anom: result.best.p_anom,
        best_persist_days: result.best.persist_days,
        train: result.train,
        test: result.test,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct BenchRow {
    decomposer: String,
    time_ms_per_100: f64,
    std_ms_per_100: f64,
    reps: usize,
}

fn cmd_bench(config: Option<&Path>, input: &Path, reps: usize) -> anyhow::Result<ExitCode> {
    let cfg = PipelineConfig::load(config)?;
    let (records, row_errors) = io::read_observations(input)?;
    anyhow::ensure!(row_errors.is_empty(), "{} malformed input rows", row_errors.len());
    let mut series = Vec::new();
    for (_, group) in io::group_by_identity(records) {
        series.push(fill_missing(&validate_series(&group)?)?);
    }
    anyhow::ensure!(!series.is_empty(), "empty corpus");

    let mut rows = Vec::new();
    for (name, dec) in [("mmd", Decomposer::Mmd), ("classical", Decomposer::Classical)] {
        let report = bench_throughput(dec, &series, &cfg.detector, &cfg.frequency, reps)?;
        rows.push(BenchRow {
            decomposer: name.to_string(),
            time_ms_per_100: report.time_ms_per_100,
            std_ms_per_100: report.std_ms_per_100,
            reps: report.reps,
        });
    }
    println!("{}", serde_json::to_string_pretty(&rows)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_fit_weights(feedback: &Path, reg: f64, output: &Path) -> anyhow::Result<ExitCode> {
    let records: Vec<FeedbackRecord> = io::read_jsonl(feedback)?;
    let weights = fit_weights(&records, reg)?;
    let text = serde_json::to_string_pretty(&weights)?;
    std::fs::write(output, text).with_context(|| format!("writing {}", output.display()))?;
    eprintln!("fitted weights from {} records to {}", records.len(), output.display());
    Ok(ExitCode::SUCCESS)
}
