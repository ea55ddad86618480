use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One (condition, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub scenario: Option<String>,
    pub strategy: Option<String>,
    pub grid_value: Option<f64>,
    pub label_fraction: Option<f64>,
    pub mode: String,
    pub seed: u64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub support: Vec<usize>,
    /// Cache key of the pre-trained model this row was fine-tuned from.
    pub pretrain_id: Option<String>,
    /// Timing-free fingerprint of that pre-training trace.
    pub pretrain_trace: Option<String>,
}

impl ReportRow {
    /// Everything that identifies the condition, excluding the seed.
    pub fn condition(&self) -> Condition {
        Condition {
            experiment: self.experiment.clone(),
            scenario: self.scenario.clone(),
            strategy: self.strategy.clone(),
            grid_value: self.grid_value,
            label_fraction: self.label_fraction,
            mode: self.mode.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub experiment: String,
    pub scenario: Option<String>,
    pub strategy: Option<String>,
    pub grid_value: Option<f64>,
    pub label_fraction: Option<f64>,
    pub mode: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub condition: Condition,
    pub seeds: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` with a single seed.
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub num_classes: usize,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
}

impl EvalReport {
    /// Builds the report, computing aggregates in first-appearance order.
    pub fn new(experiment: impl Into<String>, num_classes: usize, rows: Vec<ReportRow>) -> Self {
        let mut order: Vec<Condition> = Vec::new();
        let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in &rows {
            let c = r.condition();
            let idx = match order.iter().position(|o| *o == c) {
                Some(i) => i,
                None => {
                    order.push(c);
                    order.len() - 1
                }
            };
            groups.entry(idx).or_default().push(r.macro_f1);
        }
        let aggregates = order
            .into_iter()
            .enumerate()
            .map(|(i, condition)| {
                let v = &groups[&i];
                let (mean, std) = mean_std(v);
                Aggregate { condition, seeds: v.len(), mean, std }
            })
            .collect();
        Self { experiment: experiment.into(), num_classes, rows, aggregates }
    }

    pub fn aggregate(&self, pred: impl Fn(&Condition) -> bool) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| pred(&a.condition))
    }

    pub fn rows_where(&self, pred: impl Fn(&ReportRow) -> bool) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| pred(r)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("experiment,scenario,strategy,grid_value,label_fraction,mode,seed,macro_f1");
        for c in 0..self.num_classes {
            let _ = write!(out, ",f1_class_{c}");
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.experiment,
                r.scenario.as_deref().unwrap_or(""),
                r.strategy.as_deref().unwrap_or(""),
                opt(r.grid_value),
                opt(r.label_fraction),
                r.mode,
                r.seed,
                r.macro_f1
            );
            for f in &r.per_class_f1 {
                let _ = write!(out, ",{f}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json { path: PathBuf::from("<report>"), source: e })
    }
}

pub fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Writes `report.csv` and `report.json` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("report.csv");
    let json = dir.join("report.json");
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    std::fs::write(&json, report.to_json()).map_err(|e| Error::io(&json, e))?;
    Ok((csv, json))
}
