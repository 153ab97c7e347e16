//! Two-phase metric alerting: robust decomposition and distribution-free
//! anomaly detection in phase one, ranking and retrieval of actionable
//! alerts in phase two.
//!
//! Phase one decomposes each daily series into trend, seasonality and
//! residual using median statistics, then flags the last observation when
//! it falls outside a Chebyshev normal range built from median/MAD
//! residual estimates. Phase two scores anomalies with a linear ranking
//! model, enforces diversity and rate limits, and emits at most ten
//! alerts per run.

pub mod core;
pub mod decompose;
pub mod detect;
pub mod eval;
pub mod frequency;
pub mod rank;
pub mod retrieve;

pub use crate::core::{
    AnomalyVerdict, Decomposition, LabelRecord, MetricSeries, Priority, RankedAlert, RawRecord,
};
