//! Distribution-free normal range from Chebyshev's inequality with
//! median/MAD residual statistics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{median, AnomalyVerdict, Decomposition, MetricSeries};
use crate::decompose::{DecomposeError, Decomposer};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("expected anomaly probability must be in (0,1), got {0}")]
    BadProbability(f64),
    #[error("need at least 3 residuals for robust statistics, got {0}")]
    TooFewResiduals(usize),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
}

/// Detector configuration; `k = 1/sqrt(p_anom)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Expected probability of seeing an anomaly.
    pub p_anom: f64,
    /// MAD-to-standard-deviation scale, 1.4826 for consistency at the Gaussian.
    pub mad_scale_b: f64,
    /// Floor on sigma_hat; `None` derives 1e-9 * max(1, |median(X)|) per series.
    pub min_sigma: Option<f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { p_anom: 0.01, mad_scale_b: 1.4826, min_sigma: None }
    }
}

impl DetectorConfig {
    pub fn sigma_floor(&self, series_values: &[f64]) -> f64 {
        self.min_sigma.unwrap_or_else(|| 1e-9 * median(series_values).abs().max(1.0))
    }
}

/// Chebyshev multiplier for an expected exceed probability p.
pub fn chebyshev_k(p_anom: f64) -> Result<f64, DetectError> {
    if !(0.0..1.0).contains(&p_anom) || p_anom <= 0.0 {
        return Err(DetectError::BadProbability(p_anom));
    }
    Ok(1.0 / p_anom.sqrt())
}

/// Robust residual statistics: mu_hat = median, sigma_hat = b * MAD
/// floored at `sigma_floor`.
pub fn robust_stats(
    residual: &[f64],
    cfg: &DetectorConfig,
    sigma_floor: f64,
) -> Result<(f64, f64), DetectError> {
    if residual.len() < 3 {
        return Err(DetectError::TooFewResiduals(residual.len()));
    }
    let mu = median(residual);
    let deviations: Vec<f64> = residual.iter().map(|r| (r - mu).abs()).collect();
    let sigma = (cfg.mad_scale_b * median(&deviations)).max(sigma_floor);
    Ok((mu, sigma))
}

/// Normal range T_t + S_t + mu_hat +/- k*sigma_hat. Statistics are taken
/// over residuals strictly before t, keeping the tested point out of its
/// own band.
pub fn normal_range(
    decomp: &Decomposition,
    t: usize,
    cfg: &DetectorConfig,
    sigma_floor: f64,
) -> Result<(f64, f64), DetectError> {
    let (mu, sigma) = robust_stats(&decomp.residual[..t], cfg, sigma_floor)?;
    let k = chebyshev_k(cfg.p_anom)?;
    let center = decomp.trend[t] + decomp.seasonal[t] + mu;
    Ok((center - k * sigma, center + k * sigma))
}

/// Test the last observation of a gap-filled series against its normal
/// range, reporting severity and the trailing exceed streak.
pub fn detect_last(
    series: &MetricSeries,
    cfg: &DetectorConfig,
    w: usize,
) -> Result<AnomalyVerdict, DetectError> {
    detect_last_with(series, cfg, w, Decomposer::Mmd)
}

/// `detect_last` with an explicit decomposer choice (evaluation harness).
pub fn detect_last_with(
    series: &MetricSeries,
    cfg: &DetectorConfig,
    w: usize,
    decomposer: Decomposer,
) -> Result<AnomalyVerdict, DetectError> {
    let decomp = decomposer.decompose(series, w)?;
    let n = series.len();
    let floor = cfg.sigma_floor(&series.values);
    let last = n - 1;

    let (mu, sigma) = robust_stats(&decomp.residual[..last], cfg, floor)?;
    let k = chebyshev_k(cfg.p_anom)?;
    let center = decomp.trend[last] + decomp.seasonal[last] + mu;
    let (band_low, band_high) = (center - k * sigma, center + k * sigma);
    let last_value = series.values[last];
    let is_anomaly = last_value < band_low || last_value > band_high;
    let severity = (decomp.residual[last] - mu).abs() / sigma;

    // Walk back while each trailing point is outside the band built from
    // residuals strictly before it.
    let mut exceed_streak = 0usize;
    if is_anomaly {
        exceed_streak = 1;
        let mut t = last;
        while t > 3 {
            t -= 1;
            let (lo, hi) = match normal_range(&decomp, t, cfg, floor) {
                Ok(b) => b,
                Err(_) => break,
            };
            if series.values[t] < lo || series.values[t] > hi {
                exceed_streak += 1;
            } else {
                break;
            }
        }
    }

    Ok(AnomalyVerdict {
        metric_id: series.metric_id.clone(),
        dimensions: series.dimensions.clone(),
        band_low,
        band_high,
        last_value,
        is_anomaly,
        severity,
        exceed_streak,
        mu_hat: mu,
        sigma_hat: sigma,
    })
}
