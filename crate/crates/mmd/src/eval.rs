//! Evaluation machinery: label aggregation, detection metrics, grid
//! search with a train/test firewall, synthetic corpus generation and
//! single-threaded throughput benchmarking.

use std::collections::BTreeMap;
use std::time::Instant;

use chrono::NaiveDate;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StudentT};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{LabelRecord, MetricSeries, Priority};
use crate::decompose::Decomposer;
use crate::detect::{detect_last_with, DetectError, DetectorConfig};
use crate::frequency::{estimate_period, FrequencyConfig, FrequencyError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("viewer count must be >= 1")]
    NoViewers,
    #[error("more labels ({labels}) than viewers ({viewers})")]
    LabelsExceedViewers { labels: usize, viewers: usize },
    #[error("corpus has no positive labels; recall undefined")]
    NoPositiveLabels,
    #[error("empty parameter grid")]
    EmptyGrid,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Frequency(#[from] FrequencyError),
}

/// Crowd labels for one point collapsed by majority vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedLabel {
    pub metric_id: String,
    pub timestamp: NaiveDate,
    pub agreement_ratio: f64,
    pub is_alert_majority: bool,
}

/// Fraction of viewers who flagged the point.
pub fn agreement_ratio(labels: &[LabelRecord], viewers: usize) -> Result<f64, EvalError> {
    if viewers == 0 {
        return Err(EvalError::NoViewers);
    }
    if labels.len() > viewers {
        return Err(EvalError::LabelsExceedViewers { labels: labels.len(), viewers });
    }
    let flags = labels.iter().filter(|l| l.is_alert).count();
    Ok(flags as f64 / viewers as f64)
}

/// Collapse raw label records into per-point aggregates; `viewers` maps
/// metric id to how many people saw that series.
pub fn aggregate_labels(
    records: &[LabelRecord],
    viewers: &BTreeMap<String, usize>,
) -> Result<Vec<AggregatedLabel>, EvalError> {
    let mut grouped: BTreeMap<(String, NaiveDate), Vec<&LabelRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry((r.metric_id.clone(), r.timestamp)).or_default().push(r);
    }
    let mut out = Vec::with_capacity(grouped.len());
    for ((metric_id, timestamp), labels) in grouped {
        let viewers = viewers.get(&metric_id).copied().unwrap_or(labels.len());
        let owned: Vec<LabelRecord> = labels.into_iter().cloned().collect();
        let ratio = agreement_ratio(&owned, viewers)?;
        out.push(AggregatedLabel {
            metric_id,
            timestamp,
            agreement_ratio: ratio,
            is_alert_majority: ratio > 0.5,
        });
    }
    Ok(out)
}

/// F-beta; defined as 0 when precision and recall are both 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    if precision == 0.0 && recall == 0.0 {
        return 0.0;
    }
    let b2 = beta * beta;
    (1.0 + b2) * precision * recall / (b2 * precision + recall)
}

/// Confusion counts and derived detection metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, fn_count: usize, tn: usize, beta: f64) -> Self {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_count == 0 { 0.0 } else { tp as f64 / (tp + fn_count) as f64 };
        MetricsReport {
            tp,
            fp,
            fn_count,
            tn,
            precision,
            recall,
            f_beta: f_beta(precision, recall, beta),
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_count + self.tn
    }
}

/// Noise family for the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseKind {
    Gaussian { sigma: f64 },
    StudentT { df: f64, scale: f64 },
    /// Exponential shifted to zero mean.
    ShiftedExp { rate: f64 },
}

impl NoiseKind {
    /// Standard deviation of the noise, used to size injected anomalies.
    pub fn std_dev(&self) -> f64 {
        match *self {
            NoiseKind::Gaussian { sigma } => sigma,
            NoiseKind::StudentT { df, scale } => {
                if df > 2.0 {
                    scale * (df / (df - 2.0)).sqrt()
                } else {
                    scale
                }
            }
            NoiseKind::ShiftedExp { rate } => 1.0 / rate,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            NoiseKind::Gaussian { sigma } => Normal::new(0.0, sigma).unwrap().sample(rng),
            NoiseKind::StudentT { df, scale } => scale * StudentT::new(df).unwrap().sample(rng),
            NoiseKind::ShiftedExp { rate } => Exp::new(rate).unwrap().sample(rng) - 1.0 / rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_series: usize,
    pub length: usize,
    pub period: usize,
    pub trend_slope: f64,
    pub base_level: f64,
    pub seasonal_amp: f64,
    pub noise: NoiseKind,
    /// Per-day probability of starting an injected anomaly.
    pub anomaly_rate: f64,
    /// Anomaly size in noise standard deviations.
    pub anomaly_magnitude: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_series: 164,
            length: 212, // seven months of daily data
            period: 7,
            trend_slope: 0.05,
            base_level: 100.0,
            seasonal_amp: 5.0,
            noise: NoiseKind::Gaussian { sigma: 1.0 },
            anomaly_rate: 0.01,
            anomaly_magnitude: 15.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AnomalyKind {
    /// Single-day blip.
    Spike,
    /// Sustained offset over several consecutive days.
    LevelShift { days: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedAnomaly {
    /// First affected index.
    pub t: usize,
    pub kind: AnomalyKind,
}

impl InjectedAnomaly {
    pub fn covers(&self, t: usize) -> bool {
        match self.kind {
            AnomalyKind::Spike => t == self.t,
            AnomalyKind::LevelShift { days } => (self.t..self.t + days).contains(&t),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSeries {
    pub series: MetricSeries,
    pub anomalies: Vec<InjectedAnomaly>,
}

impl SyntheticSeries {
    pub fn label_at(&self, t: usize) -> bool {
        self.anomalies.iter().any(|a| a.covers(t))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub series: Vec<SyntheticSeries>,
}

/// Reproducible synthetic corpus: linear trend + sinusoidal seasonality +
/// noise, with spikes and short level shifts injected at known positions.
pub fn gen_corpus(spec: &CorpusSpec) -> Corpus {
    let start = NaiveDate::from_ymd_opt(2018, 1, 1).unwrap();
    let warmup = 2 * spec.period + 2;
    let mut series = Vec::with_capacity(spec.n_series);

    for idx in 0..spec.n_series {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(idx as u64));
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut values: Vec<f64> = (0..spec.length)
            .map(|t| {
                spec.base_level
                    + spec.trend_slope * t as f64
                    + spec.seasonal_amp
                        * (std::f64::consts::TAU * t as f64 / spec.period as f64 + phase).sin()
                    + spec.noise.sample(&mut rng)
            })
            .collect();

        let mut anomalies = Vec::new();
        let size = spec.anomaly_magnitude * spec.noise.std_dev();
        let mut t = warmup;
        while t < spec.length {
            if rng.gen_bool(spec.anomaly_rate) {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let kind = if rng.gen_bool(0.6) {
                    AnomalyKind::Spike
                } else {
                    AnomalyKind::LevelShift { days: 3 }
                };
                match kind {
                    AnomalyKind::Spike => values[t] += sign * size,
                    AnomalyKind::LevelShift { days } => {
                        for u in t..(t + days).min(spec.length) {
                            values[u] += sign * size;
                        }
                    }
                }
                anomalies.push(InjectedAnomaly { t, kind });
                // leave a clean gap so injected events do not overlap
                t += spec.period.max(4);
            }
            t += 1;
        }

        let dims = match idx % 3 {
            0 => BTreeMap::new(),
            1 => BTreeMap::from([("country".to_string(), format!("c{}", idx % 7))]),
            _ => BTreeMap::from([
                ("country".to_string(), format!("c{}", idx % 7)),
                ("device".to_string(), format!("d{}", idx % 2)),
            ]),
        };
        let metric = MetricSeries {
            metric_id: format!("metric{idx:03}"),
            dimensions: dims,
            priority: Priority::ALL[idx % 4],
            timestamps: (0..spec.length as u64).map(|i| start + chrono::Days::new(i)).collect(),
            values,
            period_w: Some(spec.period),
        };
        series.push(SyntheticSeries { series: metric, anomalies });
    }

    Corpus { spec: spec.clone(), series }
}

/// One labeled evaluation point: test index t of one series as if it
/// were the last observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub series_idx: usize,
    pub t: usize,
    pub label: bool,
}

/// Evaluation points for a corpus: every injected-anomaly day plus
/// negatives sampled on a stride, all with enough trailing history.
pub fn corpus_eval_points(corpus: &Corpus, min_history: usize, negative_stride: usize) -> Vec<EvalPoint> {
    let mut points = Vec::new();
    for (idx, s) in corpus.series.iter().enumerate() {
        for t in min_history..s.series.len() {
            let label = s.label_at(t);
            if label || (t - min_history) % negative_stride.max(1) == 0 {
                points.push(EvalPoint { series_idx: idx, t, label });
            }
        }
    }
    points
}

/// Detector configuration being evaluated or tuned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorChoice {
    pub decomposer: Decomposer,
    pub detector: DetectorConfig,
    /// Exceed-streak threshold applied to detection output.
    pub persist_days: usize,
}

/// Raw confusion counts (tp, fp, fn, tn) from replaying evaluation
/// points; does not require positives to be present.
pub fn confusion_counts(
    series: &[MetricSeries],
    points: &[EvalPoint],
    choice: &DetectorChoice,
    w: usize,
) -> Result<(usize, usize, usize, usize), EvalError> {
    let (mut tp, mut fp, mut fn_count, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for p in points {
        let prefix = series[p.series_idx].prefix(p.t + 1);
        let period = series[p.series_idx].period_w.unwrap_or(w);
        let verdict = detect_last_with(&prefix, &choice.detector, period, choice.decomposer)?;
        let flagged = verdict.is_anomaly && verdict.exceed_streak >= choice.persist_days;
        match (flagged, p.label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_count += 1,
            (false, false) => tn += 1,
        }
    }
    Ok((tp, fp, fn_count, tn))
}

/// Replay every evaluation point as the last observation of its trailing
/// history and tally confusion counts against the labels. A series'
/// cached `period_w` wins over the fallback `w`.
pub fn score_detector(
    series: &[MetricSeries],
    points: &[EvalPoint],
    choice: &DetectorChoice,
    w: usize,
    beta: f64,
) -> Result<MetricsReport, EvalError> {
    if !points.iter().any(|p| p.label) {
        return Err(EvalError::NoPositiveLabels);
    }
    let (tp, fp, fn_count, tn) = confusion_counts(series, points, choice, w)?;
    Ok(MetricsReport::from_counts(tp, fp, fn_count, tn, beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub p_anom: f64,
    pub persist_days: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: GridPoint,
    pub train: MetricsReport,
    pub test: MetricsReport,
}

/// Exhaustive grid search maximizing train F-beta; the held-out report is
/// computed only for the winning point. Ties go to the smallest p_anom,
/// then the smallest persist_days.
pub fn grid_search(
    grid: &[GridPoint],
    series: &[MetricSeries],
    train_points: &[EvalPoint],
    test_points: &[EvalPoint],
    decomposer: Decomposer,
    w: usize,
    beta: f64,
) -> Result<GridSearchResult, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let mut candidates: Vec<GridPoint> = grid.to_vec();
    candidates.sort_by(|a, b| {
        a.p_anom
            .partial_cmp(&b.p_anom)
            .expect("finite p_anom")
            .then(a.persist_days.cmp(&b.persist_days))
    });

    let mut best: Option<(GridPoint, MetricsReport)> = None;
    for point in candidates {
        let choice = DetectorChoice {
            decomposer,
            detector: DetectorConfig { p_anom: point.p_anom, ..Default::default() },
            persist_days: point.persist_days,
        };
        let report = score_detector(series, train_points, &choice, w, beta)?;
        let better = match &best {
            None => true,
            Some((_, b)) => report.f_beta > b.f_beta,
        };
        if better {
            best = Some((point, report));
        }
    }
    let (best, train) = best.expect("grid nonempty");

    let choice = DetectorChoice {
        decomposer,
        detector: DetectorConfig { p_anom: best.p_anom, ..Default::default() },
        persist_days: best.persist_days,
    };
    let test = score_detector(series, test_points, &choice, w, beta)?;
    Ok(GridSearchResult { best, train, test })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub time_ms_per_100: f64,
    pub std_ms_per_100: f64,
    pub reps: usize,
}

/// Single-threaded wall-clock cost of the full per-series detection
/// pipeline (period estimation, decomposition, range test), normalized
/// per 100 series. One warmup pass, then `reps` timed passes.
pub fn bench_throughput(
    decomposer: Decomposer,
    series: &[MetricSeries],
    cfg: &DetectorConfig,
    freq_cfg: &FrequencyConfig,
    reps: usize,
) -> Result<BenchReport, EvalError> {
    if series.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let reps = reps.max(5);
    let run = |sink: &mut f64| -> Result<(), EvalError> {
        for s in series {
            let w = estimate_period(s, freq_cfg)?.period_w;
            let v = detect_last_with(s, cfg, w, decomposer)?;
            *sink += v.severity; // keep the work observable
        }
        Ok(())
    };

    let mut sink = 0.0;
    run(&mut sink)?; // warmup

    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run(&mut sink)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        samples.push(ms / series.len() as f64 * 100.0);
    }
    std::hint::black_box(sink);

    let mean = samples.iter().sum::<f64>() / reps as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / reps as f64;
    Ok(BenchReport { time_ms_per_100: mean, std_ms_per_100: var.sqrt(), reps })
}
