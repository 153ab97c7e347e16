//! Moving-metric decomposition (median-based trend and seasonality) and
//! the classical moving-average baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{median_inplace, Decomposition, MetricSeries};

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("period w must be >= 2, got {0}")]
    PeriodTooSmall(usize),
    #[error("series length {len} too short for period {w} (need {need})")]
    SeriesTooShort { len: usize, w: usize, need: usize },
    #[error("series contains missing values; gap-fill before decomposing")]
    MissingValues,
}

/// Which decomposition backs the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Decomposer {
    #[default]
    Mmd,
    Classical,
}

impl Decomposer {
    pub fn decompose(self, series: &MetricSeries, w: usize) -> Result<Decomposition, DecomposeError> {
        match self {
            Decomposer::Mmd => mmd_decompose(series, w),
            Decomposer::Classical => classical_decompose(series, w),
        }
    }
}

fn check(series: &MetricSeries, w: usize) -> Result<(), DecomposeError> {
    if w < 2 {
        return Err(DecomposeError::PeriodTooSmall(w));
    }
    let need = (2 * w).max(w + 1);
    if series.len() < need {
        return Err(DecomposeError::SeriesTooShort { len: series.len(), w, need });
    }
    if series.has_missing() {
        return Err(DecomposeError::MissingValues);
    }
    Ok(())
}

/// Centered moving average of window `w`. Even windows use the standard
/// 2xw-MA (w+1 points with half-weight endpoints). Windows truncate and
/// renormalize near the edges, so every position gets a value.
pub fn symmetric_ma(x: &[f64], w: usize) -> Result<Vec<f64>, DecomposeError> {
    if w < 2 {
        return Err(DecomposeError::PeriodTooSmall(w));
    }
    if x.len() < w {
        return Err(DecomposeError::SeriesTooShort { len: x.len(), w, need: w });
    }
    let n = x.len() as i64;
    let (half, weights): (i64, Vec<f64>) = if w % 2 == 1 {
        let h = (w as i64 - 1) / 2;
        (h, vec![1.0; w])
    } else {
        // half-weight endpoints keep the even window centered
        let h = w as i64 / 2;
        let mut ws = vec![1.0; w + 1];
        ws[0] = 0.5;
        ws[w] = 0.5;
        (h, ws)
    };
    let mut out = Vec::with_capacity(x.len());
    for t in 0..n {
        let mut sum = 0.0;
        let mut wsum = 0.0;
        for (k, &wt) in weights.iter().enumerate() {
            let idx = t - half + k as i64;
            if (0..n).contains(&idx) {
                sum += wt * x[idx as usize];
                wsum += wt;
            }
        }
        out.push(sum / wsum);
    }
    Ok(out)
}

/// Per-phase median: output at t is the median of every input entry whose
/// index is congruent to t modulo w. The result is periodic with period w.
pub fn seasonal_median(l_prime: &[f64], w: usize) -> Result<Vec<f64>, DecomposeError> {
    if w < 2 {
        return Err(DecomposeError::PeriodTooSmall(w));
    }
    if l_prime.len() < 2 * w {
        return Err(DecomposeError::SeriesTooShort { len: l_prime.len(), w, need: 2 * w });
    }
    let mut phase_medians = Vec::with_capacity(w);
    let mut scratch = Vec::with_capacity(l_prime.len() / w + 1);
    for phase in 0..w {
        scratch.clear();
        scratch.extend(l_prime.iter().skip(phase).step_by(w));
        phase_medians.push(median_inplace(&mut scratch));
    }
    Ok((0..l_prime.len()).map(|t| phase_medians[t % w]).collect())
}

/// Right-aligned rolling median over a (w+1)-point window of indices
/// t-w..=t; early windows truncate to 0..=t.
pub fn rolling_median_right(s_prime: &[f64], w: usize) -> Result<Vec<f64>, DecomposeError> {
    if s_prime.len() < w + 1 {
        return Err(DecomposeError::SeriesTooShort { len: s_prime.len(), w, need: w + 1 });
    }
    // Sorted window maintained incrementally; w is small so O(w) shifts are fine.
    let n = s_prime.len();
    let mut window: Vec<f64> = Vec::with_capacity(w + 1);
    let mut out = Vec::with_capacity(n);
    // growth phase: truncated windows 0..=t
    for (t, &v) in s_prime.iter().take(w + 1).enumerate() {
        let pos = window.partition_point(|&x| x < v);
        window.insert(pos, v);
        let m = t + 1;
        out.push(if m % 2 == 1 {
            window[m / 2]
        } else {
            0.5 * (window[m / 2 - 1] + window[m / 2])
        });
    }
    // steady state: swap the expiring value for the new one with one shift
    let m = w + 1;
    let mid = m / 2;
    let odd = m % 2 == 1;
    let win = &mut window[..m];
    for t in (w + 1)..n {
        let v = s_prime[t];
        let old = s_prime[t - w - 1];
        // branchless rank counts; the window is tiny so scans beat binary search
        let mut ins = 0usize;
        let mut old_pos = 0usize;
        for &x in win.iter() {
            ins += usize::from(x < v);
            old_pos += usize::from(x < old);
        }
        if ins <= old_pos {
            let mut i = old_pos;
            while i > ins {
                win[i] = win[i - 1];
                i -= 1;
            }
            win[ins] = v;
        } else {
            for i in old_pos..ins - 1 {
                win[i] = win[i + 1];
            }
            win[ins - 1] = v;
        }
        out.push(if odd { win[mid] } else { 0.5 * (win[mid - 1] + win[mid]) });
    }
    Ok(out)
}

/// Median-based decomposition: rough trend L by symmetric moving average,
/// per-phase median seasonality from X-L, right-aligned rolling-median
/// trend from X-S plus a median bias term, residual R = X-T-S.
pub fn mmd_decompose(series: &MetricSeries, w: usize) -> Result<Decomposition, DecomposeError> {
    check(series, w)?;
    let x = &series.values;
    let rough_trend = symmetric_ma(x, w)?;
    let detrended: Vec<f64> = x.iter().zip(&rough_trend).map(|(a, b)| a - b).collect();
    let seasonal = seasonal_median(&detrended, w)?;
    let deseasonal: Vec<f64> = x.iter().zip(&seasonal).map(|(a, b)| a - b).collect();
    let trend_f = rolling_median_right(&deseasonal, w)?;
    // residual before bias correction doubles as the bias sample
    let mut residual: Vec<f64> = deseasonal.iter().zip(&trend_f).map(|(a, b)| a - b).collect();
    let mut scratch = residual.clone();
    let bias = median_inplace(&mut scratch);
    let trend: Vec<f64> = trend_f.iter().map(|t| t + bias).collect();
    for r in residual.iter_mut() {
        *r -= bias;
    }
    Ok(Decomposition { trend, seasonal, residual })
}

/// Additive classical decomposition: moving-average trend, per-phase mean
/// seasonality re-centered to zero mean over one period.
pub fn classical_decompose(series: &MetricSeries, w: usize) -> Result<Decomposition, DecomposeError> {
    check(series, w)?;
    let x = &series.values;
    let trend = symmetric_ma(x, w)?;
    let detrended: Vec<f64> = x.iter().zip(&trend).map(|(a, b)| a - b).collect();
    let mut phase_means = vec![0.0; w];
    let mut phase_counts = vec![0usize; w];
    for (t, &v) in detrended.iter().enumerate() {
        phase_means[t % w] += v;
        phase_counts[t % w] += 1;
    }
    for (m, c) in phase_means.iter_mut().zip(&phase_counts) {
        *m /= *c as f64;
    }
    let level = phase_means.iter().sum::<f64>() / w as f64;
    for m in phase_means.iter_mut() {
        *m -= level;
    }
    let seasonal: Vec<f64> = (0..x.len()).map(|t| phase_means[t % w]).collect();
    let residual: Vec<f64> = x
        .iter()
        .zip(trend.iter().zip(&seasonal))
        .map(|(xi, (ti, si))| xi - ti - si)
        .collect();
    Ok(Decomposition { trend, seasonal, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{median, Priority};
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

    #[test]
    fn symmetric_ma_constant_invariant() {
        let x = vec![4.2; 12];
        for w in [2, 3, 4, 5] {
            let ma = symmetric_ma(&x, w).unwrap();
            assert!(ma.iter().all(|v| (v - 4.2).abs() < 1e-12));
        }
    }

    #[test]
    fn symmetric_ma_truncated_edges() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let ma = symmetric_ma(&x, 3).unwrap();
        assert!((ma[0] - 1.5).abs() < 1e-12);
        assert!((ma[1] - 2.0).abs() < 1e-12);
        assert!((ma[2] - 3.0).abs() < 1e-12);
        assert!((ma[3] - 4.0).abs() < 1e-12);
        assert!((ma[4] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn symmetric_ma_linear_ramp_interior_exact() {
        let x: Vec<f64> = (0..20).map(|t| t as f64).collect();
        let ma = symmetric_ma(&x, 5).unwrap();
        for t in 2..18 {
            assert!((ma[t] - x[t]).abs() < 1e-12, "t={t}");
        }
        // even w is exact on a line too (half-weight endpoints stay centered)
        let ma4 = symmetric_ma(&x, 4).unwrap();
        for t in 2..18 {
            assert!((ma4[t] - x[t]).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn seasonal_median_exact_pattern() {
        let pattern = [3.0, -1.0, 0.5, 2.0, -4.0, 1.0, -1.5];
        let l: Vec<f64> = (0..28).map(|t| pattern[t % 7]).collect();
        let s = seasonal_median(&l, 7).unwrap();
        for (t, v) in s.iter().enumerate() {
            assert!((v - pattern[t % 7]).abs() < 1e-12);
        }
    }

    #[test]
    fn seasonal_median_ignores_minority_outlier() {
        let pattern = [3.0, -1.0, 0.5, 2.0, -4.0, 1.0, -1.5];
        let clean: Vec<f64> = (0..35).map(|t| pattern[t % 7]).collect();
        let mut dirty = clean.clone();
        dirty[10] += 1000.0;
        let s_clean = seasonal_median(&clean, 7).unwrap();
        let s_dirty = seasonal_median(&dirty, 7).unwrap();
        assert_eq!(s_clean, s_dirty);
        // brute-force oracle per phase
        for phase in 0..7 {
            let vals: Vec<f64> = dirty.iter().skip(phase).step_by(7).copied().collect();
            assert!((s_dirty[phase] - median(&vals)).abs() < 1e-12);
        }
    }

    #[test]
    fn seasonal_median_w2_example() {
        let l = [1.0, 5.0, 3.0, 7.0, 2.0, 6.0];
        let s = seasonal_median(&l, 2).unwrap();
        assert_eq!(s, vec![2.0, 6.0, 2.0, 6.0, 2.0, 6.0]);
    }

    #[test]
    fn rolling_median_truncated_then_full() {
        let s = [1.0, 2.0, 100.0, 3.0, 4.0];
        let m = rolling_median_right(&s, 2).unwrap();
        assert_eq!(m, vec![1.0, 1.5, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rolling_median_constant() {
        let s = vec![7.0; 10];
        let m = rolling_median_right(&s, 3).unwrap();
        assert!(m.iter().all(|v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn rolling_median_step_transition() {
        let w = 4;
        let mut s = vec![0.0; 12];
        for v in s.iter_mut().skip(6) {
            *v = 1.0;
        }
        let m = rolling_median_right(&s, w).unwrap();
        // brute-force oracle
        for t in 0..s.len() {
            let lo = t.saturating_sub(w);
            assert_eq!(m[t], median(&s[lo..=t]), "t={t}");
        }
        // median flips once a majority of the (w+1)-window sits past the step:
        // ceil((w+1)/2) samples in, counting the step day itself
        let shift = (w + 2) / 2;
        assert_eq!(m[6 + shift - 2], 0.0);
        assert!(m[6 + shift - 1] > 0.0);
    }

    #[test]
    fn mmd_constant_series() {
        let s = series(vec![5.0; 21]);
        let d = mmd_decompose(&s, 7).unwrap();
        for t in 0..21 {
            assert!((d.trend[t] - 5.0).abs() < 1e-12);
            assert!(d.seasonal[t].abs() < 1e-12);
            assert!(d.residual[t].abs() < 1e-12);
        }
    }

    #[test]
    fn classical_constant_series() {
        let s = series(vec![5.0; 21]);
        let d = classical_decompose(&s, 7).unwrap();
        for t in 0..21 {
            assert!((d.trend[t] - 5.0).abs() < 1e-12);
            assert!(d.seasonal[t].abs() < 1e-12);
            assert!(d.residual[t].abs() < 1e-12);
        }
    }

    #[test]
    fn mmd_zero_median_residual() {
        let vals: Vec<f64> = (0..70)
            .map(|t| {
                0.3 * t as f64
                    + 4.0 * (2.0 * std::f64::consts::PI * t as f64 / 7.0).sin()
                    + ((t * 37 + 11) % 17) as f64 * 0.1
            })
            .collect();
        let d = mmd_decompose(&series(vals), 7).unwrap();
        assert!(median(&d.residual).abs() < 1e-9);
    }

    #[test]
    fn classical_noiseless_interior_residual_zero() {
        let vals: Vec<f64> = (0..70)
            .map(|t| 0.5 * t as f64 + 2.0 * (2.0 * std::f64::consts::PI * t as f64 / 7.0).sin())
            .collect();
        let d = classical_decompose(&series(vals), 7).unwrap();
        // interior only: edge windows are truncated and the phase means absorb edge bias
        for t in 14..56 {
            assert!(d.residual[t].abs() < 0.3, "t={t} r={}", d.residual[t]);
        }
    }

    #[test]
    fn seasonal_components_periodic() {
        let vals: Vec<f64> = (0..60).map(|t| (t as f64 * 0.7).sin() * 3.0 + t as f64 * 0.1).collect();
        let s = series(vals);
        for dec in [Decomposer::Mmd, Decomposer::Classical] {
            let d = dec.decompose(&s, 6).unwrap();
            for t in 6..60 {
                assert_eq!(d.seasonal[t], d.seasonal[t - 6]);
            }
        }
    }

    #[test]
    fn classical_mean_shift_vs_mmd_bounded() {
        let pattern = [3.0, -1.0, 0.5, 2.0, -4.0, 1.0, -1.5];
        let n = 70;
        let clean: Vec<f64> = (0..n).map(|t| 10.0 + pattern[t % 7]).collect();
        let mut dirty = clean.clone();
        let outlier = 200.0;
        dirty[35] += outlier;
        let cycles = (n / 7) as f64;

        let dc = classical_decompose(&series(clean.clone()), 7).unwrap();
        let dd = classical_decompose(&series(dirty.clone()), 7).unwrap();
        let classical_shift = (dd.seasonal[0] - dc.seasonal[0]).abs();
        // the outlier leaks into trend; phase-mean shift stays on the order of M/cycles
        assert!(classical_shift > 0.1 * outlier / cycles, "shift {classical_shift}");

        let mc = mmd_decompose(&series(clean), 7).unwrap();
        let md = mmd_decompose(&series(dirty), 7).unwrap();
        let mmd_shift = (md.seasonal[0] - mc.seasonal[0]).abs();
        assert!(mmd_shift < classical_shift);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_series() -> impl Strategy<Value = (Vec<f64>, usize)> {
            (2usize..9).prop_flat_map(|w| {
                (proptest::collection::vec(-1e3f64..1e3, (2 * w).max(w + 1)..120), Just(w))
            })
        }

        proptest! {
            #[test]
            fn reconstruction_and_zero_median((vals, w) in arb_series()) {
                let s = series(vals.clone());
                for dec in [Decomposer::Mmd, Decomposer::Classical] {
                    let d = dec.decompose(&s, w).unwrap();
                    for t in 0..vals.len() {
                        let rec = d.trend[t] + d.seasonal[t] + d.residual[t];
                        let tol = 1e-9 * vals[t].abs().max(1.0);
                        prop_assert!((rec - vals[t]).abs() <= tol);
                    }
                }
                let d = mmd_decompose(&s, w).unwrap();
                prop_assert!(median(&d.residual).abs() <= 1e-9);
            }

            #[test]
            fn deterministic((vals, w) in arb_series()) {
                let s = series(vals);
                let a = mmd_decompose(&s, w).unwrap();
                let b = mmd_decompose(&s, w).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
