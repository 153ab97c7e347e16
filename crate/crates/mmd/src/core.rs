//! Domain types shared across the pipeline, plus series validation,
//! missing-value handling and the Pearson correlation primitive.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("no input records")]
    EmptyInput,
    #[error("records mix series identities: {first} vs {other}")]
    MixedIdentity { first: String, other: String },
    #[error("need at least {need} observed values, got {got}")]
    TooFewObserved { need: usize, got: usize },
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("vectors too short for correlation (need length >= 2)")]
    TooShort,
    #[error("zero variance input, correlation undefined")]
    ZeroVariance,
    #[error("invalid priority {0:?}")]
    InvalidPriority(String),
}

/// User-defined metric priority, P1 highest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum Priority {
    P1,
    P2,
    #[default]
    P3,
    P4,
}

impl Priority {
    pub const ALL: [Priority; 4] = [Priority::P1, Priority::P2, Priority::P3, Priority::P4];

    /// One-hot encoding with fixed P1..P4 ordering.
    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self as usize] = 1.0;
        v
    }
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Priority::P1 => write!(f, "P1"),
            Priority::P2 => write!(f, "P2"),
            Priority::P3 => write!(f, "P3"),
            Priority::P4 => write!(f, "P4"),
        }
    }
}

impl FromStr for Priority {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "P1" | "p1" => Ok(Priority::P1),
            "P2" | "p2" => Ok(Priority::P2),
            "P3" | "p3" => Ok(Priority::P3),
            "P4" | "p4" => Ok(Priority::P4),
            other => Err(CoreError::InvalidPriority(other.to_string())),
        }
    }
}

/// One ingested observation row before validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub metric_id: String,
    pub dimensions: BTreeMap<String, String>,
    pub date: NaiveDate,
    pub value: f64,
    pub priority: Priority,
}

/// A single metric slice: daily observations plus dimension metadata.
///
/// Missing observations are represented as NaN until `fill_missing` runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSeries {
    pub metric_id: String,
    /// Dimension name -> value; absent dimensions are rolled up.
    pub dimensions: BTreeMap<String, String>,
    pub priority: Priority,
    pub timestamps: Vec<NaiveDate>,
    pub values: Vec<f64>,
    /// Cached seasonal period (observations per cycle), if estimated.
    pub period_w: Option<usize>,
}

impl MetricSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    /// Canonical series identity: metric id plus sorted dimension pairs.
    pub fn identity(&self) -> String {
        identity_key(&self.metric_id, &self.dimensions)
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.timestamps.last().copied()
    }

    /// Trailing window of up to `days` values ending at the last observation.
    pub fn trailing_window(&self, days: usize) -> &[f64] {
        let start = self.len().saturating_sub(days);
        &self.values[start..]
    }

    /// Copy of the first `len` observations, keeping metadata.
    pub fn prefix(&self, len: usize) -> MetricSeries {
        MetricSeries {
            metric_id: self.metric_id.clone(),
            dimensions: self.dimensions.clone(),
            priority: self.priority,
            timestamps: self.timestamps[..len].to_vec(),
            values: self.values[..len].to_vec(),
            period_w: self.period_w,
        }
    }
}

/// Canonical identity string for a (metric, dimensions) pair.
pub fn identity_key(metric_id: &str, dimensions: &BTreeMap<String, String>) -> String {
    let mut key = metric_id.to_string();
    for (k, v) in dimensions {
        key.push('|');
        key.push_str(k);
        key.push('=');
        key.push_str(v);
    }
    key
}

/// Trend/seasonal/residual components, aligned with the source series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub residual: Vec<f64>,
}

impl Decomposition {
    pub fn len(&self) -> usize {
        self.trend.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trend.is_empty()
    }
}

/// Detection outcome for the last observation of one series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnomalyVerdict {
    pub metric_id: String,
    pub dimensions: BTreeMap<String, String>,
    pub band_low: f64,
    pub band_high: f64,
    pub last_value: f64,
    pub is_anomaly: bool,
    /// Deviation in robust standard deviations: |R_last - mu_hat| / sigma_hat.
    pub severity: f64,
    /// Trailing consecutive out-of-band days, 0 when the last day is in band.
    pub exceed_streak: usize,
    pub mu_hat: f64,
    pub sigma_hat: f64,
}

impl AnomalyVerdict {
    pub fn identity(&self) -> String {
        identity_key(&self.metric_id, &self.dimensions)
    }
}

/// An anomaly promoted to alert candidate with its ranking features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedAlert {
    pub verdict: AnomalyVerdict,
    pub f_d: f64,
    pub f_p: [f64; 4],
    pub f_g: usize,
    pub score: f64,
}

/// One crowdsourced point label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRecord {
    pub metric_id: String,
    pub timestamp: NaiveDate,
    pub labeler_id: String,
    pub is_alert: bool,
}

/// Sort, deduplicate (last write wins) and gap-fill a batch of records
/// belonging to one series; calendar gaps become NaN markers.
pub fn validate_series(records: &[RawRecord]) -> Result<MetricSeries, CoreError> {
    let first = records.first().ok_or(CoreError::EmptyInput)?;
    let key = identity_key(&first.metric_id, &first.dimensions);
    for r in records {
        let k = identity_key(&r.metric_id, &r.dimensions);
        if k != key {
            return Err(CoreError::MixedIdentity { first: key, other: k });
        }
    }

    // Last write wins on duplicate dates: later records overwrite earlier.
    let mut by_date: BTreeMap<NaiveDate, f64> = BTreeMap::new();
    for r in records {
        by_date.insert(r.date, r.value);
    }

    let start = *by_date.keys().next().expect("nonempty");
    let end = *by_date.keys().next_back().expect("nonempty");
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut day = start;
    while day <= end {
        timestamps.push(day);
        values.push(by_date.get(&day).copied().unwrap_or(f64::NAN));
        day = day.succ_opt().expect("date overflow");
    }

    Ok(MetricSeries {
        metric_id: first.metric_id.clone(),
        dimensions: first.dimensions.clone(),
        priority: records.last().expect("nonempty").priority,
        timestamps,
        values,
        period_w: None,
    })
}

/// Linearly interpolate internal gaps and drop leading/trailing missing
/// values; the result carries no NaN markers.
pub fn fill_missing(series: &MetricSeries) -> Result<MetricSeries, CoreError> {
    let observed = series.values.iter().filter(|v| !v.is_nan()).count();
    if observed < 2 {
        return Err(CoreError::TooFewObserved { need: 2, got: observed });
    }

    let first = series.values.iter().position(|v| !v.is_nan()).expect("observed >= 2");
    let last = series.values.iter().rposition(|v| !v.is_nan()).expect("observed >= 2");

    let mut values = series.values[first..=last].to_vec();
    let timestamps = series.timestamps[first..=last].to_vec();

    let mut i = 0;
    while i < values.len() {
        if values[i].is_nan() {
            let lo = i - 1; // leading NaNs were trimmed
            let hi = values[i..].iter().position(|v| !v.is_nan()).expect("trailing trimmed") + i;
            let step = (values[hi] - values[lo]) / (hi - lo) as f64;
            for j in (lo + 1)..hi {
                values[j] = values[lo] + step * (j - lo) as f64;
            }
            i = hi;
        }
        i += 1;
    }

    Ok(MetricSeries {
        metric_id: series.metric_id.clone(),
        dimensions: series.dimensions.clone(),
        priority: series.priority,
        timestamps,
        values,
        period_w: series.period_w,
    })
}

/// Pearson product-moment correlation coefficient.
pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<f64, CoreError> {
    if a.len() != b.len() {
        return Err(CoreError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.len() < 2 {
        return Err(CoreError::TooShort);
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(CoreError::ZeroVariance);
    }
    Ok((cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0))
}

/// Median of a slice; even lengths average the two middle order statistics.
pub fn median(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in median input"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median by quickselect, scrambling the buffer instead of allocating.
/// Small inputs sort outright; that beats selection below ~3 cache lines.
pub(crate) fn median_inplace(values: &mut [f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let n = values.len();
    let cmp = |a: &f64, b: &f64| a.partial_cmp(b).expect("no NaN in median input");
    if n <= 24 {
        values.sort_unstable_by(cmp);
        return if n % 2 == 1 {
            values[n / 2]
        } else {
            0.5 * (values[n / 2 - 1] + values[n / 2])
        };
    }
    let (lower, upper, _) = values.select_nth_unstable_by(n / 2, cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let low_max = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (low_max + upper)
    }
}
