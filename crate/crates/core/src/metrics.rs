//! Classification metrics, forgetting, and report files.
//!
//! Recall, precision and F1 are macro-averaged: every class counts equally,
//! and a class whose denominator is zero contributes 0.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// `counts[true][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(n: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n * n {
            return Err(Error::dim("confusion matrix", &[counts.len()], &[n, n]));
        }
        Ok(Self { n, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.n..(c + 1) * self.n].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|r| self.get(r, c)).sum()
    }

    fn non_empty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Evaluation("empty confusion matrix".into()));
        }
        Ok(())
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::dim("confusion", &[preds.len()], &[labels.len()]));
    }
    let mut counts = vec![0u64; n_classes * n_classes];
    for (&p, &t) in preds.iter().zip(labels) {
        for v in [p, t] {
            if v >= n_classes {
                return Err(Error::Label {
                    index: v,
                    classes: n_classes,
                });
            }
        }
        counts[t * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { n: n_classes, counts })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn per_class(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..cm.n)
        .map(|c| {
            let tp = cm.get(c, c);
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores { precision, recall, f1 }
        })
        .collect()
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.non_empty()?;
    let trace: u64 = (0..cm.n).map(|c| cm.get(c, c)).sum();
    Ok(trace as f64 / cm.total() as f64)
}

pub fn macro_recall(cm: &ConfusionMatrix) -> Result<f64> {
    cm.non_empty()?;
    Ok(per_class(cm).iter().map(|s| s.recall).sum::<f64>() / cm.n as f64)
}

pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.non_empty()?;
    Ok(per_class(cm).iter().map(|s| s.f1).sum::<f64>() / cm.n as f64)
}

/// `F(t) = R[t][t] − R[t][T−1]` for every task but the last.
/// `r[t_eval][t_after]` must be populated for `t_after ≥ t_eval`.
pub fn forgetting(r: &[Vec<Option<f64>>]) -> Result<Vec<f64>> {
    let t_max = r.len();
    if t_max == 0 {
        return Ok(Vec::new());
    }
    (0..t_max - 1)
        .map(|t| {
            let at = |j: usize| {
                r[t].get(j)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::Evaluation(format!("R[{t}][{j}] is missing")))
            };
            Ok(at(t)? - at(t_max - 1)?)
        })
        .collect()
}

/// Metrics of one task under one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    pub active_ranks: Vec<(String, usize)>,
    pub forgetting: Option<f64>,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            accuracy: accuracy(cm)?,
            macro_recall: macro_recall(cm)?,
            macro_f1: macro_f1(cm)?,
            per_class: per_class(cm),
            active_ranks: Vec::new(),
            forgetting: None,
        })
    }
}

/// One row group of a report: a configuration evaluated on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub config: String,
    pub task: String,
    pub report: EvalReport,
}

pub const METRICS: [&str; 3] = ["accuracy", "recall", "f1"];

fn metric_values(r: &EvalReport) -> [f64; 3] {
    [r.accuracy, r.macro_recall, r.macro_f1]
}

/// `config,task,metric,value` rows; values use the shortest exact decimal.
pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("config,task,metric,value\n");
    for row in rows {
        for (name, v) in METRICS.iter().zip(metric_values(&row.report)) {
            writeln!(out, "{},{},{},{}", row.config, row.task, name, v).expect("string write");
        }
    }
    out
}

/// Parses [`to_csv`] output back into `(config, task, metric, value)`.
pub fn parse_csv(text: &str) -> Result<Vec<(String, String, String, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("config,task,metric,value") {
        return Err(Error::Data("missing CSV header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Data(format!("bad CSV row: {line}")));
            }
            let v = f[3]
                .parse()
                .map_err(|_| Error::Data(format!("bad value in CSV row: {line}")))?;
            Ok((f[0].to_string(), f[1].to_string(), f[2].to_string(), v))
        })
        .collect()
}

/// Markdown with one table per task: configurations as rows, Acc/Recall/F1
/// as columns (percent).
pub fn to_markdown(rows: &[ReportRow]) -> String {
    let mut tasks: Vec<&str> = Vec::new();
    for r in rows {
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
    }
    let mut out = String::new();
    for task in tasks {
        writeln!(out, "## {task}\n").unwrap();
        writeln!(out, "| config | Acc | Recall | F1 |").unwrap();
        writeln!(out, "|---|---|---|---|").unwrap();
        for r in rows.iter().filter(|r| r.task == task) {
            let [a, rc, f] = metric_values(&r.report);
            writeln!(out, "| {} | {:.2} | {:.2} | {:.2} |", r.config, a * 100.0, rc * 100.0, f * 100.0).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Writes `report.csv` and `report.md` into `dir`.
pub fn emit_report(rows: &[ReportRow], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.csv"), to_csv(rows))?;
    std::fs::write(dir.join("report.md"), to_markdown(rows))?;
    Ok(())
}
