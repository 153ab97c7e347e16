//! Point-wise anomaly ranking: linear score g over severity, priority and
//! granularity features, with weights fit from binary alert feedback.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{AnomalyVerdict, Priority, RankedAlert};

#[derive(Debug, Error)]
pub enum RankError {
    #[error("need at least {need} feedback records, got {got}")]
    TooFewRecords { need: usize, got: usize },
    #[error("feedback contains only one class")]
    SingleClass,
    #[error("non-finite feature value in feedback")]
    NonFiniteFeature,
}

/// Weights of the linear ranking score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankWeights {
    pub w_d: f64,
    pub w_p: [f64; 4],
    pub w_g: f64,
}

impl Default for RankWeights {
    /// Severity dominates, priorities strictly ordered P1 > P4, mild
    /// preference for finer-grained slices. Operator config, not learned.
    fn default() -> Self {
        RankWeights { w_d: 1.0, w_p: [4.0, 3.0, 2.0, 1.0], w_g: 1.0 }
    }
}

/// Feature vector of one alert candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Features {
    /// Deviation severity in robust standard deviations.
    pub f_d: f64,
    /// One-hot priority.
    pub f_p: [f64; 4],
    /// Number of dimensions not rolled up.
    pub f_g: usize,
}

/// One unit of user feedback on an emitted alert.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub f_d: f64,
    pub f_p: [f64; 4],
    pub f_g: usize,
    pub is_valid: bool,
}

pub fn extract_features(verdict: &AnomalyVerdict, priority: Priority) -> Features {
    Features {
        f_d: verdict.severity,
        f_p: priority.one_hot(),
        f_g: verdict.dimensions.len(),
    }
}

pub fn score(features: &Features, weights: &RankWeights) -> f64 {
    let prio: f64 = features.f_p.iter().zip(&weights.w_p).map(|(f, w)| f * w).sum();
    weights.w_d * features.f_d + prio + weights.w_g * features.f_g as f64
}

/// Promote a verdict to a scored alert candidate.
pub fn rank_alert(verdict: AnomalyVerdict, priority: Priority, weights: &RankWeights) -> RankedAlert {
    let features = extract_features(&verdict, priority);
    let s = score(&features, weights);
    RankedAlert {
        verdict,
        f_d: features.f_d,
        f_p: features.f_p,
        f_g: features.f_g,
        score: s,
    }
}

const FIT_MAX_ITERS: usize = 200_000;
const FIT_GRAD_TOL: f64 = 1e-6;

/// Fit ranking weights by L2-regularized logistic regression on validity
/// feedback, batch gradient descent from a zero start. The intercept is
/// fitted but discarded: ranking is translation-invariant.
pub fn fit_weights(feedback: &[FeedbackRecord], reg: f64) -> Result<RankWeights, RankError> {
    if feedback.len() < 10 {
        return Err(RankError::TooFewRecords { need: 10, got: feedback.len() });
    }
    let positives = feedback.iter().filter(|r| r.is_valid).count();
    if positives == 0 || positives == feedback.len() {
        return Err(RankError::SingleClass);
    }

    let n = feedback.len();
    let mut rows: Vec<[f64; 7]> = Vec::with_capacity(n);
    let mut labels: Vec<f64> = Vec::with_capacity(n);
    for r in feedback {
        let row = [r.f_d, r.f_p[0], r.f_p[1], r.f_p[2], r.f_p[3], r.f_g as f64, 1.0];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(RankError::NonFiniteFeature);
        }
        rows.push(row);
        labels.push(if r.is_valid { 1.0 } else { 0.0 });
    }

    // Step size from the Lipschitz bound of the logistic gradient.
    let max_row_sq = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .fold(0.0f64, f64::max);
    let lipschitz = 0.25 * max_row_sq + reg;
    let step = 1.0 / lipschitz;

    let mut theta = [0.0f64; 7];
    for _ in 0..FIT_MAX_ITERS {
        let mut grad = [0.0f64; 7];
        for (row, &y) in rows.iter().zip(&labels) {
            let z: f64 = row.iter().zip(&theta).map(|(x, t)| x * t).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - y;
            for (g, x) in grad.iter_mut().zip(row) {
                *g += err * x;
            }
        }
        let inv_n = 1.0 / n as f64;
        for (j, g) in grad.iter_mut().enumerate() {
            *g *= inv_n;
            if j < 6 {
                *g += reg * theta[j]; // intercept unregularized
            }
        }
        let grad_norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= step * g;
        }
        if grad_norm < FIT_GRAD_TOL {
            break;
        }
    }

    Ok(RankWeights {
        w_d: theta[0],
        w_p: [theta[1], theta[2], theta[3], theta[4]],
        w_g: theta[5],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Uniform};

    fn feat(f_d: f64, priority: Priority, f_g: usize) -> Features {
        Features { f_d, f_p: priority.one_hot(), f_g }
    }

    #[test]
    fn granularity_counts_dimensions() {
        use std::collections::BTreeMap;
        let mut dims = BTreeMap::new();
        dims.insert("Country".to_string(), "US".to_string());
        let verdict = AnomalyVerdict {
            metric_id: "m".into(),
            dimensions: dims.clone(),
            band_low: 0.0,
            band_high: 1.0,
            last_value: 2.0,
            is_anomaly: true,
            severity: 12.0,
            exceed_streak: 1,
            mu_hat: 0.0,
            sigma_hat: 1.0,
        };
        assert_eq!(extract_features(&verdict, Priority::P1).f_g, 1);

        let mut v2 = verdict.clone();
        v2.dimensions.insert("Device".to_string(), "PC".to_string());
        let f = extract_features(&v2, Priority::P2);
        assert_eq!(f.f_g, 2);
        assert_eq!(f.f_p, [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(f.f_d, 12.0);
    }

    #[test]
    fn score_arithmetic() {
        let zero = RankWeights { w_d: 0.0, w_p: [0.0; 4], w_g: 0.0 };
        assert_eq!(score(&feat(10.0, Priority::P1, 2), &zero), 0.0);

        let w = RankWeights { w_d: 1.0, w_p: [4.0, 3.0, 2.0, 1.0], w_g: 0.5 };
        assert_eq!(score(&feat(10.0, Priority::P1, 2), &w), 15.0);
    }

    #[test]
    fn score_linear_and_scale_invariant_ranking() {
        let w1 = RankWeights { w_d: 1.0, w_p: [4.0, 3.0, 2.0, 1.0], w_g: 0.5 };
        let w2 = RankWeights { w_d: -0.5, w_p: [1.0, 1.0, 0.0, 2.0], w_g: 3.0 };
        let combo = RankWeights {
            w_d: 2.0 * w1.w_d + 3.0 * w2.w_d,
            w_p: [
                2.0 * w1.w_p[0] + 3.0 * w2.w_p[0],
                2.0 * w1.w_p[1] + 3.0 * w2.w_p[1],
                2.0 * w1.w_p[2] + 3.0 * w2.w_p[2],
                2.0 * w1.w_p[3] + 3.0 * w2.w_p[3],
            ],
            w_g: 2.0 * w1.w_g + 3.0 * w2.w_g,
        };
        let feats = [
            feat(10.0, Priority::P1, 2),
            feat(3.0, Priority::P4, 0),
            feat(25.0, Priority::P2, 4),
        ];
        for f in &feats {
            let lhs = score(f, &combo);
            let rhs = 2.0 * score(f, &w1) + 3.0 * score(f, &w2);
            assert!((lhs - rhs).abs() < 1e-9);
        }
        // doubling weights doubles scores and preserves argsort
        let doubled = RankWeights {
            w_d: 2.0 * w1.w_d,
            w_p: [2.0 * w1.w_p[0], 2.0 * w1.w_p[1], 2.0 * w1.w_p[2], 2.0 * w1.w_p[3]],
            w_g: 2.0 * w1.w_g,
        };
        let s1: Vec<f64> = feats.iter().map(|f| score(f, &w1)).collect();
        let s2: Vec<f64> = feats.iter().map(|f| score(f, &doubled)).collect();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    fn synth_feedback(n: usize, seed: u64, true_w: &RankWeights, intercept: f64) -> Vec<FeedbackRecord> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let sev = Uniform::new(0.0, 20.0);
        let gran = Uniform::new(0usize, 5);
        let prio = Uniform::new(0usize, 4);
        let unif = Uniform::new(0.0f64, 1.0);
        (0..n)
            .map(|_| {
                let f = Features {
                    f_d: sev.sample(&mut rng),
                    f_p: Priority::ALL[prio.sample(&mut rng)].one_hot(),
                    f_g: gran.sample(&mut rng),
                };
                let z = score(&f, true_w) + intercept;
                let p = 1.0 / (1.0 + (-z).exp());
                FeedbackRecord {
                    f_d: f.f_d,
                    f_p: f.f_p,
                    f_g: f.f_g,
                    is_valid: unif.sample(&mut rng) < p,
                }
            })
            .collect()
    }

    fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let mut concordant = 0i64;
        let mut discordant = 0i64;
        for i in 0..n {
            for j in (i + 1)..n {
                let x = (a[i] - a[j]).signum();
                let y = (b[i] - b[j]).signum();
                if x * y > 0.0 {
                    concordant += 1;
                } else if x * y < 0.0 {
                    discordant += 1;
                }
            }
        }
        (concordant - discordant) as f64 / (n * (n - 1) / 2) as f64
    }

    #[test]
    fn fit_recovers_weight_structure() {
        let true_w = RankWeights { w_d: 2.0, w_p: [1.0, 0.0, 0.0, -1.0], w_g: 0.5 };
        let feedback = synth_feedback(500, 11, &true_w, -20.0);
        let fitted = fit_weights(&feedback, 1e-3).unwrap();
        assert!(fitted.w_d > 0.0);
        assert!(fitted.w_g > 0.0);
        assert!(fitted.w_p[0] > fitted.w_p[3]);

        let feats: Vec<Features> = feedback
            .iter()
            .map(|r| Features { f_d: r.f_d, f_p: r.f_p, f_g: r.f_g })
            .collect();
        let true_scores: Vec<f64> = feats.iter().map(|f| score(f, &true_w)).collect();
        let fit_scores: Vec<f64> = feats.iter().map(|f| score(f, &fitted)).collect();
        let tau = kendall_tau(&true_scores, &fit_scores);
        assert!(tau >= 0.9, "kendall tau {tau}");
    }

    #[test]
    fn separated_data_stays_finite() {
        let mut feedback = Vec::new();
        for i in 0..30 {
            feedback.push(FeedbackRecord {
                f_d: 15.0 + i as f64,
                f_p: Priority::P1.one_hot(),
                f_g: 2,
                is_valid: true,
            });
            feedback.push(FeedbackRecord {
                f_d: 1.0 + 0.1 * i as f64,
                f_p: Priority::P4.one_hot(),
                f_g: 0,
                is_valid: false,
            });
        }
        let w = fit_weights(&feedback, 0.1).unwrap();
        assert!(w.w_d.is_finite());
        assert!(w.w_p.iter().all(|v| v.is_finite()));
        assert!(w.w_g.is_finite());
        assert!(w.w_d.abs() < 1e3);
    }

    #[test]
    fn fit_order_free() {
        let true_w = RankWeights::default();
        let feedback = synth_feedback(120, 3, &true_w, -12.0);
        let mut reversed = feedback.clone();
        reversed.reverse();
        let a = fit_weights(&feedback, 0.01).unwrap();
        let b = fit_weights(&reversed, 0.01).unwrap();
        assert!((a.w_d - b.w_d).abs() < 1e-9);
        assert!((a.w_g - b.w_g).abs() < 1e-9);
        for k in 0..4 {
            assert!((a.w_p[k] - b.w_p[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(matches!(fit_weights(&[], 0.0), Err(RankError::TooFewRecords { .. })));
        let one_class: Vec<FeedbackRecord> = (0..12)
            .map(|i| FeedbackRecord {
                f_d: i as f64,
                f_p: Priority::P1.one_hot(),
                f_g: 1,
                is_valid: true,
            })
            .collect();
        assert!(matches!(fit_weights(&one_class, 0.0), Err(RankError::SingleClass)));
    }
}
