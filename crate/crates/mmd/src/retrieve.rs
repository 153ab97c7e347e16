//! Second-phase alert selection: persistence and dedupe business rules,
//! per-metric diversity filtering, and the global top-10 cap.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::core::{pearson_corr, AnomalyVerdict, Priority, RankedAlert};
use crate::rank::{rank_alert, RankWeights};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Absolute Pearson correlation at or above which two alerts count as similar.
    pub corr_threshold: f64,
    pub per_metric_cap: usize,
    pub global_cap: usize,
    /// Suppress similar alerts for the same identity within this many days.
    pub dedupe_days_k: i64,
    /// Minimum trailing exceed streak before alerting.
    pub persist_days_k: usize,
    /// Trailing days of raw values used for correlation comparisons.
    pub corr_window: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            corr_threshold: 0.9,
            per_metric_cap: 2,
            global_cap: 10,
            dedupe_days_k: 7,
            persist_days_k: 1,
            corr_window: 60,
        }
    }
}

/// One previously sent alert: date plus the trailing-window values it was
/// compared on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub date: NaiveDate,
    pub window: Vec<f64>,
}

/// Sent-alert memory keyed by series identity.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AlertHistory {
    pub entries: BTreeMap<String, Vec<HistoryEntry>>,
}

impl AlertHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, identity: String, entry: HistoryEntry) {
        self.entries.entry(identity).or_default().push(entry);
    }

    pub fn total_alerts(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }
}

/// An anomaly entering phase two, with the context retrieval needs.
#[derive(Debug, Clone)]
pub struct AlertCandidate {
    pub verdict: AnomalyVerdict,
    pub priority: Priority,
    pub date: NaiveDate,
    /// Trailing raw values (up to `corr_window` days) ending at `date`.
    pub window: Vec<f64>,
}

/// Pipeline stage that suppressed a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Persistence,
    Dedupe,
    PerMetricDiversity,
    GlobalCap,
}

/// A candidate that made it through every rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmittedAlert {
    pub alert: RankedAlert,
    pub date: NaiveDate,
    /// Stages the candidate passed, in pipeline order.
    pub rule_trace: Vec<Stage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Suppression {
    pub identity: String,
    pub date: NaiveDate,
    pub stage: Stage,
}

/// Result of one retrieval run: emitted alerts, suppression log, and the
/// history including the newly emitted alerts.
#[derive(Debug, Clone)]
pub struct RetrievalOutcome {
    pub alerts: Vec<EmittedAlert>,
    pub suppressed: Vec<Suppression>,
    pub history: AlertHistory,
}

/// Keep only candidates whose exceed streak meets the persistence rule.
pub fn apply_persistence_rule(verdict: &AnomalyVerdict, cfg: &RetrievalConfig) -> bool {
    verdict.exceed_streak >= cfg.persist_days_k
}

/// True (keep) iff no sufficiently similar alert for the same identity
/// was sent within the last `dedupe_days_k` days. An undefined
/// correlation (constant window) counts as similar and suppresses.
pub fn apply_dedupe_rule(
    candidate: &AlertCandidate,
    history: &AlertHistory,
    cfg: &RetrievalConfig,
) -> bool {
    let identity = candidate.verdict.identity();
    let Some(past) = history.entries.get(&identity) else {
        return true;
    };
    for entry in past {
        let age = (candidate.date - entry.date).num_days();
        if age < 0 || age > cfg.dedupe_days_k {
            continue;
        }
        if age == 0 {
            // exact-identity same-day repeat
            return false;
        }
        if windows_similar(&candidate.window, &entry.window, cfg.corr_threshold) {
            return false;
        }
    }
    true
}

/// Similarity via absolute Pearson correlation over the overlapping
/// trailing span; undefined correlation is treated as similar.
fn windows_similar(a: &[f64], b: &[f64], threshold: f64) -> bool {
    let n = a.len().min(b.len());
    if n < 2 {
        return true;
    }
    let a = &a[a.len() - n..];
    let b = &b[b.len() - n..];
    match pearson_corr(a, b) {
        Ok(c) => c.abs() >= threshold,
        Err(_) => true,
    }
}

/// A scored candidate flowing through diversity selection.
#[derive(Debug, Clone)]
pub struct ScoredCandidate {
    pub alert: RankedAlert,
    pub date: NaiveDate,
    pub window: Vec<f64>,
}

fn rank_order(a: &ScoredCandidate, b: &ScoredCandidate) -> std::cmp::Ordering {
    b.alert
        .score
        .partial_cmp(&a.alert.score)
        .expect("finite scores")
        .then(
            b.alert
                .verdict
                .severity
                .partial_cmp(&a.alert.verdict.severity)
                .expect("finite severity"),
        )
        .then_with(|| a.alert.verdict.identity().cmp(&b.alert.verdict.identity()))
}

/// Greedy diversity selection within one metric: take the top-scored
/// candidate, then admit further candidates only when dissimilar from
/// every already-selected one, up to `per_metric_cap`.
pub fn select_per_metric(
    mut candidates: Vec<ScoredCandidate>,
    cfg: &RetrievalConfig,
) -> (Vec<ScoredCandidate>, Vec<ScoredCandidate>) {
    candidates.sort_by(rank_order);
    let mut selected: Vec<ScoredCandidate> = Vec::new();
    let mut rejected: Vec<ScoredCandidate> = Vec::new();
    for cand in candidates {
        if selected.len() >= cfg.per_metric_cap {
            rejected.push(cand);
            continue;
        }
        let similar = selected
            .iter()
            .any(|s| windows_similar(&cand.window, &s.window, cfg.corr_threshold));
        if selected.is_empty() || !similar {
            selected.push(cand);
        } else {
            rejected.push(cand);
        }
    }
    (selected, rejected)
}

/// Merge per-metric selections, sort by score (severity, then identity as
/// tie-breaks) and truncate to the global cap.
pub fn select_global(
    per_metric: Vec<Vec<ScoredCandidate>>,
    cfg: &RetrievalConfig,
) -> (Vec<ScoredCandidate>, Vec<ScoredCandidate>) {
    let mut all: Vec<ScoredCandidate> = per_metric.into_iter().flatten().collect();
    all.sort_by(rank_order);
    let overflow = all.split_off(all.len().min(cfg.global_cap));
    (all, overflow)
}

/// Full phase-two pipeline: persistence -> dedupe -> score -> per-metric
/// diversity -> global cap, then append emitted alerts to history.
///
/// The global cap is a daily budget: alerts already sent on the run's
/// date (per the incoming history) count against it, so re-running the
/// pipeline on the same day cannot exceed the day's allowance.
pub fn run_retrieval(
    candidates: Vec<AlertCandidate>,
    weights: &RankWeights,
    history: &AlertHistory,
    cfg: &RetrievalConfig,
) -> RetrievalOutcome {
    let today = candidates.first().map(|c| c.date);
    let sent_today = history
        .entries
        .values()
        .flatten()
        .filter(|e| Some(e.date) == today)
        .count();
    let day_cfg = RetrievalConfig {
        global_cap: cfg.global_cap.saturating_sub(sent_today),
        ..cfg.clone()
    };
    let cfg = &day_cfg;
    let mut suppressed = Vec::new();
    let mut by_metric: BTreeMap<String, Vec<ScoredCandidate>> = BTreeMap::new();

    for cand in candidates {
        let identity = cand.verdict.identity();
        if !cand.verdict.is_anomaly || !apply_persistence_rule(&cand.verdict, cfg) {
            suppressed.push(Suppression { identity, date: cand.date, stage: Stage::Persistence });
            continue;
        }
        if !apply_dedupe_rule(&cand, history, cfg) {
            suppressed.push(Suppression { identity, date: cand.date, stage: Stage::Dedupe });
            continue;
        }
        let alert = rank_alert(cand.verdict, cand.priority, weights);
        by_metric.entry(alert.verdict.metric_id.clone()).or_default().push(ScoredCandidate {
            alert,
            date: cand.date,
            window: cand.window,
        });
    }

    let mut per_metric = Vec::new();
    for (_, cands) in by_metric {
        let (selected, rejected) = select_per_metric(cands, cfg);
        for r in rejected {
            suppressed.push(Suppression {
                identity: r.alert.verdict.identity(),
                date: r.date,
                stage: Stage::PerMetricDiversity,
            });
        }
        per_metric.push(selected);
    }

    let (finalists, overflow) = select_global(per_metric, cfg);
    for r in overflow {
        suppressed.push(Suppression {
            identity: r.alert.verdict.identity(),
            date: r.date,
            stage: Stage::GlobalCap,
        });
    }

    let mut new_history = history.clone();
    let alerts: Vec<EmittedAlert> = finalists
        .into_iter()
        .map(|c| {
            new_history.record(
                c.alert.verdict.identity(),
                HistoryEntry { date: c.date, window: c.window.clone() },
            );
            EmittedAlert {
                alert: c.alert,
                date: c.date,
                rule_trace: vec![
                    Stage::Persistence,
                    Stage::Dedupe,
                    Stage::PerMetricDiversity,
                    Stage::GlobalCap,
                ],
            }
        })
        .collect();

    RetrievalOutcome { alerts, suppressed, history: new_history }
}
