//! Confusion matrices, per-class recall and balanced accuracy.
//!
//! Per-class "accuracy" is reported as recall (diagonal over row sum) and
//! balanced accuracy is the plain mean of those recalls. A class with no true
//! samples has undefined recall and is an error rather than being skipped.
//! Run-to-run spread uses the sample standard deviation (n - 1 denominator).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Read;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::Label;
use crate::sum::compensated_sum;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("line {line}: unknown label `{value}`")]
    UnknownLabel { line: u64, value: String },
    #[error("class `{0}` has no true samples; recall is undefined")]
    EmptyClass(String),
    #[error("need at least {needed} values, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("confusion matrix is not square over {0} classes")]
    Shape(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRecord {
    pub path: String,
    pub true_label: Label,
    pub pred_label: Label,
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let n = classes.len();
        if counts.len() != n || counts.iter().any(|row| row.len() != n) {
            return Err(MetricsError::Shape(n));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

pub fn confusion_matrix(
    preds: &[PredictionRecord],
    classes: &[Label],
) -> Result<ConfusionMatrix, MetricsError> {
    let index: HashMap<Label, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let n = classes.len();
    let mut counts = vec![vec![0u64; n]; n];
    for p in preds {
        let row = index.get(&p.true_label);
        let col = index.get(&p.pred_label);
        match (row, col) {
            (Some(&i), Some(&j)) => counts[i][j] += 1,
            (None, _) => {
                return Err(MetricsError::UnknownLabel {
                    line: 0,
                    value: p.true_label.to_string(),
                })
            }
            (_, None) => {
                return Err(MetricsError::UnknownLabel {
                    line: 0,
                    value: p.pred_label.to_string(),
                })
            }
        }
    }
    Ok(ConfusionMatrix {
        classes: classes.iter().map(|c| c.to_string()).collect(),
        counts,
    })
}

/// Recall of every class, in class order.
pub fn per_class_recall(cm: &ConfusionMatrix) -> Result<Vec<(String, f64)>, MetricsError> {
    cm.classes
        .iter()
        .zip(&cm.counts)
        .enumerate()
        .map(|(i, (class, row))| {
            let support: u64 = row.iter().sum();
            if support == 0 {
                return Err(MetricsError::EmptyClass(class.clone()));
            }
            Ok((class.clone(), row[i] as f64 / support as f64))
        })
        .collect()
}

pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    Ok(mean_of_recalls(&per_class_recall(cm)?))
}

fn mean_of_recalls(recalls: &[(String, f64)]) -> f64 {
    compensated_sum(recalls.iter().map(|(_, r)| *r)) / recalls.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub n: u64,
    pub balanced_accuracy: f64,
    pub per_class_recall: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Result<Self, MetricsError> {
        let per_class_recall = per_class_recall(cm)?;
        Ok(Self {
            n: cm.total(),
            balanced_accuracy: mean_of_recalls(&per_class_recall),
            per_class_recall,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let recall: serde_json::Map<String, serde_json::Value> = self
            .per_class_recall
            .iter()
            .map(|(c, r)| (c.clone(), serde_json::Value::from(*r)))
            .collect();
        serde_json::json!({
            "n": self.n,
            "balanced_accuracy": self.balanced_accuracy,
            "per_class_recall": recall,
        })
    }

    /// Fixed-width table, four decimals per cell.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>10}", "metric", "value");
        let _ = writeln!(out, "{:<20} {:>10}", "n", self.n);
        let _ = writeln!(
            out,
            "{:<20} {:>10.4}",
            "balanced_accuracy", self.balanced_accuracy
        );
        for (class, r) in &self.per_class_recall {
            let _ = writeln!(out, "{:<20} {:>10.4}", format!("recall:{class}"), r);
        }
        out
    }
}

/// Arithmetic mean; needs at least one value.
pub fn mean(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::TooFewSamples { needed: 1, got: 0 });
    }
    Ok(compensated_sum(values.iter().copied()) / values.len() as f64)
}

/// Mean and sample standard deviation; needs at least two values.
pub fn aggregate_runs(values: &[f64]) -> Result<(f64, f64), MetricsError> {
    if values.len() < 2 {
        return Err(MetricsError::TooFewSamples {
            needed: 2,
            got: values.len(),
        });
    }
    let m = mean(values)?;
    let ss = compensated_sum(values.iter().map(|v| (v - m) * (v - m)));
    Ok((m, (ss / (values.len() - 1) as f64).sqrt()))
}

/// `mean ± std` with four decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.4} ± {std:.4}")
}

/// Mean ± std of balanced accuracy and per-class recall over several runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub runs: usize,
    pub n: u64,
    pub balanced_accuracy: (f64, f64),
    pub per_class_recall: Vec<(String, (f64, f64))>,
}

impl AggregateReport {
    pub fn from_reports(reports: &[MetricReport]) -> Result<Self, MetricsError> {
        let bal: Vec<f64> = reports.iter().map(|r| r.balanced_accuracy).collect();
        let balanced_accuracy = aggregate_runs(&bal)?;
        let classes: Vec<String> = reports[0]
            .per_class_recall
            .iter()
            .map(|(c, _)| c.clone())
            .collect();
        let per_class_recall = classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let vals: Vec<f64> = reports.iter().map(|r| r.per_class_recall[i].1).collect();
                Ok((c.clone(), aggregate_runs(&vals)?))
            })
            .collect::<Result<_, MetricsError>>()?;
        Ok(Self {
            runs: reports.len(),
            n: reports.iter().map(|r| r.n).sum(),
            balanced_accuracy,
            per_class_recall,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let pair = |(m, s): (f64, f64)| serde_json::json!({ "mean": m, "std": s });
        let recall: serde_json::Map<String, serde_json::Value> = self
            .per_class_recall
            .iter()
            .map(|(c, v)| (c.clone(), pair(*v)))
            .collect();
        serde_json::json!({
            "runs": self.runs,
            "n": self.n,
            "std_kind": "sample (n-1)",
            "balanced_accuracy": pair(self.balanced_accuracy),
            "per_class_recall": recall,
        })
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>18}", "metric", "mean ± std");
        let _ = writeln!(out, "{:<20} {:>18}", "runs", self.runs);
        let _ = writeln!(out, "{:<20} {:>18}", "n", self.n);
        let (m, s) = self.balanced_accuracy;
        let _ = writeln!(
            out,
            "{:<20} {:>18}",
            "balanced_accuracy",
            format_mean_std(m, s)
        );
        for (class, (m, s)) in &self.per_class_recall {
            let _ = writeln!(
                out,
                "{:<20} {:>18}",
                format!("recall:{class}"),
                format_mean_std(*m, *s)
            );
        }
        let _ = writeln!(
            out,
            "(std is the sample standard deviation, n-1 denominator)"
        );
        out
    }
}

/// Reads a `path,true_label,pred_label` CSV.
pub fn parse_predictions<R: Read>(input: R) -> Result<Vec<PredictionRecord>, MetricsError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = reader.headers().map_err(|e| MetricsError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != ["path", "true_label", "pred_label"] {
        return Err(MetricsError::Parse {
            line: 1,
            message: format!(
                "expected header `path,true_label,pred_label`, found `{}`",
                got.join(",")
            ),
        });
    }
    let mut records = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| MetricsError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(MetricsError::Parse {
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let label = |v: &str| {
            v.trim()
                .parse::<Label>()
                .map_err(|_| MetricsError::UnknownLabel {
                    line,
                    value: v.trim().to_string(),
                })
        };
        records.push(PredictionRecord {
            path: record[0].trim().to_string(),
            true_label: label(&record[1])?,
            pred_label: label(&record[2])?,
        });
    }
    Ok(records)
}
