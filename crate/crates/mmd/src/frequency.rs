//! One-time seasonal period estimation: ESPRIT subspace method with a
//! periodogram fallback, plus the persisted per-metric period cache.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::RwLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::MetricSeries;

#[derive(Debug, Error)]
pub enum FrequencyError {
    #[error("series of length {len} too short (need {need})")]
    TooShort { len: usize, need: usize },
    #[error("rank-deficient least-squares step in subspace solve")]
    RankDeficient,
    #[error("period cache io: {0}")]
    CacheIo(#[from] std::io::Error),
    #[error("malformed period cache line {line}: {text:?}")]
    CacheParse { line: usize, text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeriodMethod {
    Esprit,
    Periodogram,
    Default,
}

/// Outcome of period estimation for one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodEstimate {
    pub period_w: usize,
    pub method: PeriodMethod,
    /// Dominant angular frequency in radians per sample; 0 for Default.
    pub dominant_freq: f64,
    /// Fraction of (detrended) signal variance captured by the chosen component.
    pub confidence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyConfig {
    /// Cap on the subspace model order.
    pub max_order: usize,
    /// Minimum variance fraction before falling back.
    pub min_confidence: f64,
    /// Period used when no credible seasonal component is found.
    pub default_period: usize,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        FrequencyConfig { max_order: 10, min_confidence: 0.2, default_period: 7 }
    }
}

/// Mean-center and remove an ordinary-least-squares line fit.
fn detrend(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean_t = (n - 1.0) / 2.0;
    let mean_x = x.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, &v) in x.iter().enumerate() {
        let dt = t as f64 - mean_t;
        num += dt * (v - mean_x);
        den += dt * dt;
    }
    let slope = if den > 0.0 { num / den } else { 0.0 };
    x.iter()
        .enumerate()
        .map(|(t, &v)| v - mean_x - slope * (t as f64 - mean_t))
        .collect()
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// ESPRIT frequency estimation on a real series.
///
/// Centers and detrends the input, builds a Hankel matrix of height
/// floor(n/3), takes its SVD, picks the model order as the smallest count
/// of singular values holding 90% of squared singular-value energy
/// (capped at `max_order`), solves the shift-invariance least-squares
/// system on the signal subspace, and reads frequencies off the
/// eigenvalue arguments. Amplitudes come from a least-squares sinusoid
/// fit; conjugate pairs are merged. Returns (frequency, amplitude) pairs
/// sorted by descending amplitude, frequencies in (0, pi].
pub fn esprit_frequencies(
    x: &[f64],
    max_order: usize,
) -> Result<Vec<(f64, f64)>, FrequencyError> {
    let n = x.len();
    let need = 3 * max_order.max(1);
    if n < need || n < 9 {
        return Err(FrequencyError::TooShort { len: n, need: need.max(9) });
    }

    let first = subspace_frequencies(&detrend(x), max_order)?;
    if first.is_empty() {
        return Ok(Vec::new());
    }

    // The plain OLS detrend is biased by the sinusoids themselves; refit
    // the line jointly with the first-pass components and redo the
    // subspace step on the cleaner residual.
    let d = refit_line_residual(x, &first);
    let freqs = match subspace_frequencies(&d, max_order) {
        Ok(f) if !f.is_empty() => f,
        _ => first,
    };

    // Amplitudes by least-squares fit of sinusoids at the found frequencies.
    let mut design = DMatrix::zeros(n, 2 * freqs.len());
    for (k, &f) in freqs.iter().enumerate() {
        for t in 0..n {
            design[(t, 2 * k)] = (f * t as f64).cos();
            design[(t, 2 * k + 1)] = (f * t as f64).sin();
        }
    }
    let target = DMatrix::from_column_slice(n, 1, &d);
    let coeffs = design
        .svd(true, true)
        .solve(&target, 1e-12)
        .map_err(|_| FrequencyError::RankDeficient)?;

    let mut out: Vec<(f64, f64)> = freqs
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            let a = coeffs[(2 * k, 0)];
            let b = coeffs[(2 * k + 1, 0)];
            (f, (a * a + b * b).sqrt())
        })
        .collect();
    out.sort_by(|l, r| r.1.partial_cmp(&l.1).expect("finite amplitudes"));
    out.truncate((max_order / 2).max(1));
    Ok(out)
}

/// Residual of x after jointly fitting intercept, slope and sinusoids at
/// the given frequencies, with only the line removed.
fn refit_line_residual(x: &[f64], freqs: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut design = DMatrix::zeros(n, 2 + 2 * freqs.len());
    for t in 0..n {
        design[(t, 0)] = 1.0;
        design[(t, 1)] = t as f64;
        for (k, &f) in freqs.iter().enumerate() {
            design[(t, 2 + 2 * k)] = (f * t as f64).cos();
            design[(t, 3 + 2 * k)] = (f * t as f64).sin();
        }
    }
    let target = DMatrix::from_column_slice(n, 1, x);
    match design.svd(true, true).solve(&target, 1e-12) {
        Ok(c) => {
            let (intercept, slope) = (c[(0, 0)], c[(1, 0)]);
            x.iter()
                .enumerate()
                .map(|(t, &v)| v - intercept - slope * t as f64)
                .collect()
        }
        Err(_) => detrend(x),
    }
}

/// One Hankel/SVD/rotational-invariance pass; returns distinct positive
/// frequencies, unordered by amplitude.
fn subspace_frequencies(d: &[f64], max_order: usize) -> Result<Vec<f64>, FrequencyError> {
    let n = d.len();
    let height = n / 3;
    let cols = n - height + 1;
    let hankel = DMatrix::from_fn(height, cols, |i, j| d[i + j]);
    let svd = hankel.svd(true, false);
    let sv = &svd.singular_values;

    let total: f64 = sv.iter().map(|s| s * s).sum();
    if total <= 1e-12 * n as f64 {
        return Ok(Vec::new());
    }
    let mut order = 0usize;
    let mut cum = 0.0;
    for s in sv.iter() {
        cum += s * s;
        order += 1;
        if cum >= 0.9 * total {
            break;
        }
    }
    let order = order.min(max_order).min(height - 1);
    if order == 0 {
        return Ok(Vec::new());
    }

    let u = svd.u.as_ref().expect("u requested");
    let signal = u.columns(0, order);
    let upper = signal.rows(0, height - 1).clone_owned();
    let lower = signal.rows(1, height - 1).clone_owned();
    let rotation = upper
        .svd(true, true)
        .solve(&lower, 1e-12)
        .map_err(|_| FrequencyError::RankDeficient)?;

    let eigs = rotation.complex_eigenvalues();
    let mut freqs: Vec<f64> = Vec::new();
    for lambda in eigs.iter() {
        let f = lambda.arg().abs();
        if f > 1e-6 && f <= PI + 1e-12 {
            // conjugate pairs collapse to one positive frequency
            if !freqs.iter().any(|&g| (g - f).abs() < 1e-6) {
                freqs.push(f.min(PI));
            }
        }
    }
    Ok(freqs)
}

/// Period from the argmax of the magnitude-squared DFT of the centered,
/// detrended series (zero bin excluded). Independent of the ESPRIT path.
pub fn periodogram_period(
    x: &[f64],
    cfg: &FrequencyConfig,
) -> Result<PeriodEstimate, FrequencyError> {
    let n = x.len();
    if n < 8 {
        return Err(FrequencyError::TooShort { len: n, need: 8 });
    }
    let d = detrend(x);
    let nf = n as f64;

    let mut total_power = 0.0;
    let mut best_bin = 0usize;
    let mut best_power = 0.0;
    for k in 1..=n / 2 {
        let omega = 2.0 * PI * k as f64 / nf;
        let mut re = 0.0;
        let mut im = 0.0;
        for (t, &v) in d.iter().enumerate() {
            let phase = omega * t as f64;
            re += v * phase.cos();
            im -= v * phase.sin();
        }
        let p = re * re + im * im;
        total_power += p;
        if p > best_power {
            best_power = p;
            best_bin = k;
        }
    }

    if total_power <= 1e-12 * nf {
        return Ok(PeriodEstimate {
            period_w: cfg.default_period,
            method: PeriodMethod::Default,
            dominant_freq: 0.0,
            confidence: 0.0,
        });
    }

    let dominant_freq = 2.0 * PI * best_bin as f64 / nf;
    let period = (nf / best_bin as f64).round() as usize;
    let period_w = period.clamp(2, n / 2);
    Ok(PeriodEstimate {
        period_w,
        method: PeriodMethod::Periodogram,
        dominant_freq,
        confidence: best_power / total_power,
    })
}

/// Estimate the seasonal period of a gap-filled series: ESPRIT first,
/// periodogram when ESPRIT yields nothing credible, configured default
/// when neither clears `min_confidence`.
pub fn estimate_period(
    series: &MetricSeries,
    cfg: &FrequencyConfig,
) -> Result<PeriodEstimate, FrequencyError> {
    let x = &series.values;
    let n = x.len();

    let fallback_default = PeriodEstimate {
        period_w: cfg.default_period,
        method: PeriodMethod::Default,
        dominant_freq: 0.0,
        confidence: 0.0,
    };

    let effective_order = cfg.max_order.min(n / 3);
    if effective_order >= 2 {
        if let Ok(components) = esprit_frequencies(x, effective_order) {
            if let Some(&(freq, amp)) = components.first() {
                let var = variance(&detrend(x));
                let confidence = if var > 0.0 {
                    ((amp * amp / 2.0) / var).min(1.0)
                } else {
                    0.0
                };
                let period = (2.0 * PI / freq).round() as usize;
                if confidence >= cfg.min_confidence && (2..=n / 2).contains(&period) {
                    return Ok(PeriodEstimate {
                        period_w: period,
                        method: PeriodMethod::Esprit,
                        dominant_freq: freq,
                        confidence,
                    });
                }
            }
        }
    }

    if n >= 8 {
        let est = periodogram_period(x, cfg)?;
        if est.method == PeriodMethod::Periodogram && est.confidence >= cfg.min_confidence {
            return Ok(est);
        }
    }
    Ok(fallback_default)
}

/// Per-metric period cache: identity -> period_w, persisted as a flat
/// tab-separated file rewritten atomically.
#[derive(Debug, Default)]
pub struct PeriodCache {
    inner: RwLock<HashMap<String, usize>>,
}

impl PeriodCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, identity: &str) -> Option<usize> {
        self.inner.read().expect("cache lock").get(identity).copied()
    }

    pub fn insert(&self, identity: String, period_w: usize) {
        self.inner.write().expect("cache lock").insert(identity, period_w);
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cached period for the series, estimating and caching on miss.
    pub fn estimate_cached(
        &self,
        series: &MetricSeries,
        cfg: &FrequencyConfig,
    ) -> Result<usize, FrequencyError> {
        let identity = series.identity();
        if let Some(w) = self.get(&identity) {
            return Ok(w);
        }
        let est = estimate_period(series, cfg)?;
        self.insert(identity, est.period_w);
        Ok(est.period_w)
    }

    pub fn load(path: &Path) -> Result<Self, FrequencyError> {
        let text = std::fs::read_to_string(path)?;
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (key, val) = line
                .rsplit_once('\t')
                .ok_or_else(|| FrequencyError::CacheParse { line: i + 1, text: line.into() })?;
            let period: usize = val
                .trim()
                .parse()
                .map_err(|_| FrequencyError::CacheParse { line: i + 1, text: line.into() })?;
            map.insert(key.to_string(), period);
        }
        Ok(PeriodCache { inner: RwLock::new(map) })
    }

    /// Rewrite the cache file via temp-file-and-rename.
    pub fn save(&self, path: &Path) -> Result<(), FrequencyError> {
        let map = self.inner.read().expect("cache lock");
        let mut entries: Vec<(&String, &usize)> = map.iter().collect();
        entries.sort();
        let tmp = path.with_extension("tmp");
        {
            let mut file = std::fs::File::create(&tmp)?;
            for (key, period) in entries {
                writeln!(file, "{key}\t{period}")?;
            }
            file.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Priority;
    use chrono::NaiveDate;
    use std::collections::BTreeMap;

    fn series(values: Vec<f64>) -> MetricSeries {
        let start = NaiveDate::from_ymd_opt(2018, 1, 1).unwrap();
        MetricSeries {
            metric_id: "m".into(),
            dimensions: BTreeMap::new(),
            priority: Priority::P3,
            timestamps: (0..values.len() as u64).map(|i| start + chrono::Days::new(i)).collect(),
            values,
            period_w: None,
        }
    }

    fn sine(n: usize, period: f64, amp: f64) -> Vec<f64> {
        (0..n).map(|t| amp * (2.0 * PI * t as f64 / period).sin()).collect()
    }

    #[test]
    fn esprit_pure_period_7() {
        let x = sine(140, 7.0, 1.0);
        let comps = esprit_frequencies(&x, 10).unwrap();
        assert!(!comps.is_empty());
        let expected = 2.0 * PI / 7.0;
        assert!(
            (comps[0].0 - expected).abs() < 1e-6,
            "got {} want {expected}",
            comps[0].0
        );
        // oracle: FFT periodogram argmax on the same series
        let oracle = periodogram_period(&x, &FrequencyConfig::default()).unwrap();
        assert_eq!(oracle.period_w, 7);
        assert!((comps[0].0 - oracle.dominant_freq).abs() < 2.0 * PI / 140.0);
    }

    #[test]
    fn esprit_constant_is_empty() {
        let x = vec![3.0; 60];
        assert!(esprit_frequencies(&x, 10).unwrap().is_empty());
    }

    #[test]
    fn esprit_two_tone_with_noise() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let x: Vec<f64> = (0..210)
            .map(|t| {
                3.0 * (2.0 * PI * t as f64 / 7.0).sin()
                    + 1.0 * (2.0 * PI * t as f64 / 30.0).sin()
                    + noise.sample(&mut rng)
            })
            .collect();
        let comps = esprit_frequencies(&x, 10).unwrap();
        let dominant = comps[0].0;
        let period = 2.0 * PI / dominant;
        assert!((period - 7.0).abs() <= 1.0, "period {period}");
        // periodogram oracle confirms the dominant bin
        let oracle = periodogram_period(&x, &FrequencyConfig::default()).unwrap();
        assert_eq!(oracle.period_w, 7);
    }

    #[test]
    fn esprit_too_short() {
        assert!(matches!(
            esprit_frequencies(&[1.0; 20], 10),
            Err(FrequencyError::TooShort { .. })
        ));
    }

    #[test]
    fn periodogram_exact_bin() {
        let cfg = FrequencyConfig::default();
        let est = periodogram_period(&sine(140, 7.0, 2.0), &cfg).unwrap();
        assert_eq!(est.period_w, 7);
        assert_eq!(est.method, PeriodMethod::Periodogram);
        assert!(est.confidence > 0.9);
    }

    #[test]
    fn periodogram_constant_default() {
        let cfg = FrequencyConfig::default();
        let est = periodogram_period(&[4.0; 64], &cfg).unwrap();
        assert_eq!(est.method, PeriodMethod::Default);
        assert_eq!(est.period_w, cfg.default_period);
    }

    #[test]
    fn periodogram_white_noise_low_confidence() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..365).map(|_| noise.sample(&mut rng)).collect();
        let cfg = FrequencyConfig::default();
        let est = periodogram_period(&x, &cfg).unwrap();
        assert!(est.confidence < cfg.min_confidence, "confidence {}", est.confidence);
    }

    #[test]
    fn estimate_weekly_uses_esprit() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let vals: Vec<f64> = (0..140)
            .map(|t| {
                10.0 + 0.05 * t as f64
                    + 3.0 * (2.0 * PI * t as f64 / 7.0).sin()
                    + noise.sample(&mut rng)
            })
            .collect();
        let est = estimate_period(&series(vals), &FrequencyConfig::default()).unwrap();
        assert_eq!(est.period_w, 7);
        assert_eq!(est.method, PeriodMethod::Esprit);
        assert_eq!(est.period_w, (2.0 * PI / est.dominant_freq).round() as usize);
    }

    #[test]
    fn estimate_white_noise_falls_back_to_default() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let vals: Vec<f64> = (0..365).map(|_| noise.sample(&mut rng)).collect();
        let cfg = FrequencyConfig::default();
        let est = estimate_period(&series(vals), &cfg).unwrap();
        assert_eq!(est.method, PeriodMethod::Default);
        assert_eq!(est.period_w, cfg.default_period);
    }

    #[test]
    fn estimate_period_12_length_96() {
        let vals = sine(96, 12.0, 2.0);
        let est = estimate_period(&series(vals.clone()), &FrequencyConfig::default()).unwrap();
        assert_eq!(est.period_w, 12);
        // periodogram oracle agreement
        let oracle = periodogram_period(&vals, &FrequencyConfig::default()).unwrap();
        assert_eq!(oracle.period_w, 12);
    }

    #[test]
    fn estimate_deterministic() {
        let vals = sine(140, 7.0, 2.0);
        let cfg = FrequencyConfig::default();
        let a = estimate_period(&series(vals.clone()), &cfg).unwrap();
        let b = estimate_period(&series(vals), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cache_roundtrip_and_memoization() {
        let cache = PeriodCache::new();
        let cfg = FrequencyConfig::default();
        let s = series(sine(140, 7.0, 2.0));
        assert_eq!(cache.estimate_cached(&s, &cfg).unwrap(), 7);
        // poison the cache entry: a hit must not re-estimate
        cache.insert(s.identity(), 11);
        assert_eq!(cache.estimate_cached(&s, &cfg).unwrap(), 11);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("periods.tsv");
        cache.save(&path).unwrap();
        let loaded = PeriodCache::load(&path).unwrap();
        assert_eq!(loaded.get(&s.identity()), Some(11));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]
            #[test]
            fn noiseless_integer_periods_recovered(q in 3usize..=30) {
                let vals = sine(10 * q, q as f64, 2.0);
                let est = estimate_period(&series(vals), &FrequencyConfig::default()).unwrap();
                prop_assert_eq!(est.period_w, q);
            }
        }
    }
}
