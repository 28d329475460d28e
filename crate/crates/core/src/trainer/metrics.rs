use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Append-only metric history, written as `step,split,metric,value` CSV.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(&mut self, step: usize, split: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            step,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn extend(&mut self, other: &MetricsLog) {
        self.rows.extend(other.rows.iter().cloned());
    }

    /// Values of one `(split, metric)` series in insertion order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.series(split, metric).last().map(|&(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,split,metric,value\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.step, r.split, r.metric, r.value).expect("string write");
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_csv()).map_err(|e| TrainError::io(path, e))
    }

    /// Latest value of every `(split, metric)` pair.
    pub fn summary(&self) -> BTreeMap<String, BTreeMap<String, f64>> {
        let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for r in &self.rows {
            out.entry(r.split.clone())
                .or_default()
                .insert(r.metric.clone(), r.value);
        }
        out
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| TrainError::io(path, e))
}
