use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{FrameRecord, Metrics};
use super::EvalError;
use crate::attacks::AttackConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub records: Vec<FrameRecord>,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

impl SequenceReport {
    pub fn new(name: String, records: Vec<FrameRecord>) -> Self {
        match Metrics::of(&records) {
            Ok(m) => Self {
                name,
                records,
                metrics: Some(m),
                error: None,
            },
            Err(e) => Self::failed(name, records, e.to_string()),
        }
    }

    pub fn failed(name: String, records: Vec<FrameRecord>, error: String) -> Self {
        Self {
            name,
            records,
            metrics: None,
            error: Some(error),
        }
    }
}

/// Wall-clock statistics, seconds. Left out of reproducible reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_s: f64,
    pub per_sequence_s: Vec<f64>,
}

/// Results of one benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkReport {
    pub schema: String,
    pub name: String,
    pub tracker: String,
    pub attack: Option<AttackConfig>,
    pub manifest: Option<String>,
    /// Mean of the per-sequence metrics over sequences without errors.
    pub aggregate: Option<Metrics>,
    /// Mean distance of predictions to the attacker's target, patch pixels.
    pub mean_target_distance: Option<f64>,
    pub sequences: Vec<SequenceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl BenchmarkReport {
    pub const SCHEMA: &'static str = "rgbe-advbench/report/v1";

    pub fn failed_sequences(&self) -> Vec<&SequenceReport> {
        self.sequences.iter().filter(|s| s.error.is_some()).collect()
    }

    /// Path of the first non-finite number, if any.
    fn first_non_finite(&self) -> Option<String> {
        let metric = |path: String, m: &Option<Metrics>| {
            m.and_then(|m| {
                [("pr", m.pr), ("npr", m.npr), ("sr", m.sr)]
                    .into_iter()
                    .find(|(_, v)| !v.is_finite())
                    .map(|(k, _)| format!("{path}.{k}"))
            })
        };
        if let Some(p) = metric("aggregate".into(), &self.aggregate) {
            return Some(p);
        }
        if self.mean_target_distance.is_some_and(|d| !d.is_finite()) {
            return Some("mean_target_distance".into());
        }
        for (i, s) in self.sequences.iter().enumerate() {
            if let Some(p) = metric(format!("sequences[{i}].metrics"), &s.metrics) {
                return Some(p);
            }
            for (j, r) in s.records.iter().enumerate() {
                let b = [r.gt.x, r.gt.y, r.gt.w, r.gt.h, r.pred.x, r.pred.y, r.pred.w, r.pred.h];
                let finite = b.iter().chain([r.center_error, r.norm_error, r.iou].iter()).all(|v| v.is_finite())
                    && r.target_distance.is_none_or(f64::is_finite);
                if !finite {
                    return Some(format!("sequences[{i}].records[{j}]"));
                }
            }
        }
        if let Some(t) = &self.timing {
            if !t.total_s.is_finite() || t.per_sequence_s.iter().any(|v| !v.is_finite()) {
                return Some("timing".into());
            }
        }
        None
    }

    /// Canonical JSON text with a trailing newline.
    pub fn to_json(&self) -> Result<String, EvalError> {
        if let Some(p) = self.first_non_finite() {
            return Err(EvalError::NonFinite(p));
        }
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        match v.get("schema").and_then(|s| s.as_str()) {
            Some(Self::SCHEMA) => Ok(serde_json::from_value(v)?),
            Some(other) => Err(EvalError::Version(other.into())),
            None => Err(EvalError::Version("missing".into())),
        }
    }
}

pub fn write_report(report: &BenchmarkReport, path: &Path) -> Result<(), EvalError> {
    let text = report.to_json()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<BenchmarkReport, EvalError> {
    BenchmarkReport::from_json(&fs::read_to_string(path)?)
}
