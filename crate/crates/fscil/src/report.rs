//! JSON session reports and run summaries.
//!
//! Summaries hold no timestamps or durations, so two runs with the same
//! configuration and seed produce identical bytes. Wall-clock timing goes to
//! a separate file.

use std::collections::BTreeMap;
use std::path::Path;

use fscil_core::classifier::{aggregate_totals, SessionReport};
use fscil_core::protocol::{ModelChecksums, Track};
use fscil_core::prototypes::PrototypeMode;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: u32,
    pub correct: usize,
    pub total: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checksums {
    pub encoder: String,
    pub denoiser: String,
}

impl From<ModelChecksums> for Checksums {
    fn from(c: ModelChecksums) -> Self {
        Self {
            encoder: c.encoder.to_string(),
            denoiser: c.denoiser.to_string(),
        }
    }
}

/// Accuracies of one session, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session: usize,
    pub total_acc: f64,
    pub base_acc: Option<f64>,
    pub new_acc: Option<f64>,
}

impl From<&SessionReport> for SessionMetrics {
    fn from(r: &SessionReport) -> Self {
        Self {
            session: r.session,
            total_acc: r.total_acc,
            base_acc: r.base_acc,
            new_acc: r.new_acc,
        }
    }
}

/// Per-session report file of the primary track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFile {
    #[serde(flatten)]
    pub metrics: SessionMetrics,
    pub seen_classes: usize,
    pub queries: usize,
    pub per_class: Vec<ClassRow>,
    pub seeds: Seeds,
    pub checksums: Checksums,
    pub optimizer_steps_since_freeze: u64,
    pub config: RunConfig,
}

impl SessionFile {
    pub fn new(report: &SessionReport, seeds: Seeds, checksums: Checksums, config: &RunConfig) -> Self {
        Self {
            metrics: report.into(),
            seen_classes: report.per_class.len(),
            queries: report.total.total,
            per_class: report
                .per_class
                .iter()
                .map(|(c, t)| ClassRow {
                    class_id: *c,
                    correct: t.correct,
                    total: t.total,
                    accuracy: t.accuracy(),
                })
                .collect(),
            seeds,
            checksums,
            optimizer_steps_since_freeze: 0,
            config: config.clone(),
        }
    }
}

/// Metrics of one prototype rule over the whole protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub mode: String,
    pub alpha: Option<f64>,
    pub sessions: Vec<SessionMetrics>,
    pub avg: f64,
    pub last: f64,
    /// Last-session total minus the real-only baseline's.
    pub last_improvement: Option<f64>,
}

impl TrackSummary {
    pub fn new(track: &Track, baseline: Option<&Track>) -> Result<Self> {
        let totals: Vec<f64> = track.reports.iter().map(|r| r.total_acc).collect();
        let base: Option<Vec<f64>> = baseline.map(|b| b.reports.iter().map(|r| r.total_acc).collect());
        let agg = aggregate_totals(&totals, base.as_deref())?;
        let (mode, alpha) = match track.config.mode {
            PrototypeMode::Fused { alpha } => ("fused", Some(alpha)),
            PrototypeMode::RealOnly => ("real_only", None),
            PrototypeMode::GenerativeOnly => ("generative_only", None),
        };
        Ok(Self {
            mode: mode.into(),
            alpha,
            sessions: track.reports.iter().map(SessionMetrics::from).collect(),
            avg: agg.avg,
            last: agg.last,
            last_improvement: agg.last_improvement,
        })
    }

    pub fn last_new_acc(&self) -> Option<f64> {
        self.sessions.last().and_then(|s| s.new_acc)
    }

    /// Accuracies and Avg with the same rounding for every track.
    pub fn same_metrics(&self, other: &TrackSummary) -> bool {
        self.sessions == other.sessions && self.avg == other.avg && self.last == other.last
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Seeds,
    pub checksums: Checksums,
    pub optimizer_steps_since_freeze: u64,
    pub encoder_train_accuracy: f64,
    /// Keyed by track name: `fused`, `real_only`, `generative_only`.
    pub tracks: BTreeMap<String, TrackSummary>,
    pub config: RunConfig,
}

impl Summary {
    pub fn primary(&self) -> &TrackSummary {
        &self.tracks[PRIMARY]
    }
}

pub const PRIMARY: &str = "fused";
pub const REAL_ONLY: &str = "real_only";
pub const GENERATIVE_ONLY: &str = "generative_only";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Renders percentages with two decimals; absent values as `-`.
pub fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}
