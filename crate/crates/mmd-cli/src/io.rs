//! File formats: delimited observation rows in, line-delimited JSON
//! records out, plus alert-history persistence.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use mmd::core::{LabelRecord, Priority, RawRecord};
use mmd::retrieve::{AlertHistory, EmittedAlert, HistoryEntry};

/// A row that failed to parse; the run continues past it.
#[derive(Debug)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

/// Parse the observation file: one row per observation,
/// `metric_id,dims,date,value[,priority]` with dims as semicolon-joined
/// `key=value` pairs (empty = fully rolled up).
pub fn read_observations(path: &Path) -> anyhow::Result<(Vec<RawRecord>, Vec<RowError>)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading input {}", path.display()))?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match parse_row(trimmed) {
            Ok(rec) => records.push(rec),
            Err(msg) => errors.push(RowError { line: line_no, message: msg }),
        }
    }
    Ok((records, errors))
}

fn parse_row(line: &str) -> Result<RawRecord, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() < 4 || fields.len() > 5 {
        return Err(format!("expected 4 or 5 fields, got {}", fields.len()));
    }
    let metric_id = fields[0].trim();
    if metric_id.is_empty() {
        return Err("empty metric_id".into());
    }
    let dimensions = parse_dimensions(fields[1].trim())?;
    let date: NaiveDate = fields[2]
        .trim()
        .parse()
        .map_err(|e| format!("bad date {:?}: {e}", fields[2].trim()))?;
    let value: f64 = fields[3]
        .trim()
        .parse()
        .map_err(|e| format!("bad value {:?}: {e}", fields[3].trim()))?;
    if !value.is_finite() {
        return Err(format!("non-finite value {value}"));
    }
    let priority = match fields.get(4) {
        Some(p) if !p.trim().is_empty() => {
            p.trim().parse::<Priority>().map_err(|e| e.to_string())?
        }
        _ => Priority::default(),
    };
    Ok(RawRecord { metric_id: metric_id.to_string(), dimensions, date, value, priority })
}

fn parse_dimensions(field: &str) -> Result<BTreeMap<String, String>, String> {
    let mut dims = BTreeMap::new();
    if field.is_empty() {
        return Ok(dims);
    }
    for pair in field.split(';') {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| format!("bad dimension pair {pair:?}"))?;
        dims.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(dims)
}

pub fn format_dimensions(dims: &BTreeMap<String, String>) -> String {
    dims.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

/// Group raw records by series identity, preserving input order within
/// each group.
pub fn group_by_identity(records: Vec<RawRecord>) -> BTreeMap<String, Vec<RawRecord>> {
    let mut groups: BTreeMap<String, Vec<RawRecord>> = BTreeMap::new();
    for r in records {
        let key = mmd::core::identity_key(&r.metric_id, &r.dimensions);
        groups.entry(key).or_default().push(r);
    }
    groups
}

/// Write serializable records as line-delimited JSON via temp file and
/// rename.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut file = std::fs::File::create(&tmp)
            .with_context(|| format!("creating {}", tmp.display()))?;
        for r in records {
            serde_json::to_writer(&mut file, r)?;
            file.write_all(b"\n")?;
        }
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line)
            .with_context(|| format!("{} line {}", path.display(), i + 1))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> anyhow::Result<Vec<LabelRecord>> {
    read_jsonl(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct HistoryRecord {
    identity: String,
    date: NaiveDate,
    window: Vec<f64>,
}

/// Load alert history; a missing file is an empty history with a warning.
pub fn load_history(path: Option<&Path>) -> anyhow::Result<AlertHistory> {
    let Some(path) = path else {
        return Ok(AlertHistory::new());
    };
    if !path.exists() {
        eprintln!("warning: history file {} not found, starting empty", path.display());
        return Ok(AlertHistory::new());
    }
    let records: Vec<HistoryRecord> = read_jsonl(path)?;
    let mut history = AlertHistory::new();
    for r in records {
        history.record(r.identity, HistoryEntry { date: r.date, window: r.window });
    }
    Ok(history)
}

pub fn save_history(path: &Path, history: &AlertHistory) -> anyhow::Result<()> {
    let mut records = Vec::new();
    for (identity, entries) in &history.entries {
        for e in entries {
            records.push(HistoryRecord {
                identity: identity.clone(),
                date: e.date,
                window: e.window.clone(),
            });
        }
    }
    write_jsonl(path, &records)
}

/// Verdict output record: series identity, date and detection outcome.
#[derive(Debug, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub date: NaiveDate,
    pub priority: Priority,
    pub period_w: usize,
    #[serde(flatten)]
    pub verdict: mmd::core::AnomalyVerdict,
}

/// Alert output record with the rule trace.
#[derive(Debug, Serialize, Deserialize)]
pub struct AlertRecord {
    pub date: NaiveDate,
    pub score: f64,
    pub f_d: f64,
    pub f_g: usize,
    pub rule_trace: Vec<mmd::retrieve::Stage>,
    #[serde(flatten)]
    pub verdict: mmd::core::AnomalyVerdict,
}

impl AlertRecord {
    pub fn from_emitted(e: &EmittedAlert) -> Self {
        AlertRecord {
            date: e.date,
            score: e.alert.score,
            f_d: e.alert.f_d,
            f_g: e.alert.f_g,
            rule_trace: e.rule_trace.clone(),
            verdict: e.alert.verdict.clone(),
        }
    }
}
