//! Run records, loss curves and evaluation reports.

use std::path::{Path, PathBuf};

use anyhow::Result;
use dclseg_core::metrics::SegReport;
use dclseg_core::train::StepRecord;
use serde::Serialize;

use crate::formats::write_atomic;

/// Summary of one command invocation, written last so that a missing
/// record marks an incomplete run.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub config: String,
    pub seeds: Vec<u64>,
    pub stage: String,
    /// Paths relative to the directory holding this record.
    pub outputs: Vec<PathBuf>,
    /// Omitted in deterministic mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
    pub final_metrics: serde_json::Value,
    pub warnings: Vec<String>,
}

impl RunRecord {
    pub fn new(command: &str, config: String) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds: Vec::new(),
            stage: command.to_string(),
            outputs: Vec::new(),
            wall_clock_secs: None,
            final_metrics: serde_json::Value::Null,
            warnings: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn pretrain_curve_header() -> &'static str {
    "step\tloss\n"
}

pub fn finetune_curve_header() -> &'static str {
    "step\tloss\tlabeled\tunlabeled\n"
}

/// One TSV row; finite floats print with full round-trip precision.
pub fn curve_row(r: &StepRecord) -> String {
    match (r.labeled, r.unlabeled) {
        (Some(l), Some(u)) => format!("{}\t{:?}\t{:?}\t{:?}\n", r.step, r.loss, l, u),
        _ => format!("{}\t{:?}\n", r.step, r.loss),
    }
}

/// Keeps the header and rows for steps before `upto`, so a resumed run
/// can append to its own curve.
pub fn truncate_curve(text: &str, upto: u64) -> String {
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split('\t')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < upto);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct VolumeReport {
    pub volume_id: u64,
    pub report: SegReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub hd_percentile: f64,
    pub source: String,
    pub volumes: Vec<VolumeReport>,
    pub aggregate: SegReport,
}

impl EvaluationReport {
    /// `volume_id, class, dsc, asd, hd, hd_percentile`; undefined distances
    /// print as `NA`.
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:?}"));
        let mut s = String::from("volume_id\tclass\tdsc\tasd\thd\thd_percentile\n");
        for v in &self.volumes {
            for c in &v.report.classes {
                s.push_str(&format!(
                    "{}\t{}\t{:?}\t{}\t{}\t{}\n",
                    v.volume_id,
                    c.class,
                    c.dsc,
                    fmt(c.asd),
                    fmt(c.hd),
                    self.hd_percentile
                ));
            }
        }
        s
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochValidation {
    pub epoch: u64,
    pub step: u64,
    pub mean_loss: f64,
    pub report: SegReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_val_dsc: f64,
    /// Relative to the summary file.
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiSeedSummary {
    pub labeled_fraction: f64,
    /// `pretrained`, `scratch` or `resumed`.
    pub init: String,
    pub runs: Vec<SeedResult>,
    pub mean_dsc: f64,
    /// Sample standard deviation (0 for a single run).
    pub std_dsc: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_keeps_header_and_earlier_steps() {
        let text = "step\tloss\n0\t1.0\n1\t0.5\n2\t0.25\n";
        assert_eq!(truncate_curve(text, 2), "step\tloss\n0\t1.0\n1\t0.5\n");
    }

    #[test]
    fn rows_round_trip_floats() {
        let r = StepRecord {
            step: 3,
            loss: 0.1 + 0.2,
            labeled: None,
            unlabeled: None,
            lr: 0.0,
        };
        let row = curve_row(&r);
        let v: f64 = row.trim().split('\t').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, 0.1 + 0.2);
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[0.7]).1, 0.0);
    }
}
