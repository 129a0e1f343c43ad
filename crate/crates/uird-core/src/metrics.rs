//! Classification metrics and report tables.
//!
//! Zero-denominator metrics are defined as 0 (not NaN) so degenerate tasks
//! stay machine-readable; averages are macro (unweighted over classes with
//! at least one true sample).

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class * self.n_classes + predicted] += 1;
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_count(&self, class: usize) -> u64 {
        (0..self.n_classes).map(|p| self.count(class, p)).sum()
    }

    pub fn predicted_count(&self, class: usize) -> u64 {
        (0..self.n_classes).map(|t| self.count(t, class)).sum()
    }
}

/// `(precision, recall, f_score)` for one class; any zero denominator
/// yields 0 for that metric.
pub fn precision_recall_f(confusion: &ConfusionMatrix, class_index: usize) -> (f64, f64, f64) {
    let tp = confusion.count(class_index, class_index) as f64;
    let fp = confusion.predicted_count(class_index) as f64 - tp;
    let fn_ = confusion.true_count(class_index) as f64 - tp;
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Per-class metrics of one class at one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub symbol: char,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub support: u64,
}

/// Per-task evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    /// 1-based task index within a sequence.
    pub task_index: usize,
    /// Classes in introduction order (row/column order of the confusion).
    pub class_symbols: Vec<char>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f: f64,
    pub confusion: ConfusionMatrix,
    /// Real training samples per class (introduction order).
    pub real_train_counts: Vec<usize>,
    /// Synthetic (pseudo-replay) training samples per class.
    pub synthetic_train_counts: Vec<usize>,
}

impl TaskReport {
    /// Assemble a report from a filled confusion matrix. Macro averages run
    /// over classes with at least one true sample.
    pub fn from_confusion(
        task_index: usize,
        class_symbols: Vec<char>,
        confusion: ConfusionMatrix,
        real_train_counts: Vec<usize>,
        synthetic_train_counts: Vec<usize>,
    ) -> Result<Self> {
        if class_symbols.len() != confusion.n_classes() {
            return Err(Error::Invalid(format!(
                "{} symbols for a {}-class confusion",
                class_symbols.len(),
                confusion.n_classes()
            )));
        }
        let per_class: Vec<ClassMetrics> = class_symbols
            .iter()
            .enumerate()
            .map(|(i, &symbol)| {
                let (precision, recall, f_score) = precision_recall_f(&confusion, i);
                ClassMetrics {
                    symbol,
                    precision,
                    recall,
                    f_score,
                    support: confusion.true_count(i),
                }
            })
            .collect();
        let present: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.support > 0).collect();
        let denom = present.len().max(1) as f64;
        let macro_precision = present.iter().map(|c| c.precision).sum::<f64>() / denom;
        let macro_recall = present.iter().map(|c| c.recall).sum::<f64>() / denom;
        let macro_f = present.iter().map(|c| c.f_score).sum::<f64>() / denom;
        Ok(Self {
            task_index,
            class_symbols,
            per_class,
            macro_precision,
            macro_recall,
            macro_f,
            confusion,
            real_train_counts,
            synthetic_train_counts,
        })
    }

    pub fn class_f(&self, symbol: char) -> Option<f64> {
        self.per_class.iter().find(|c| c.symbol == symbol).map(|c| c.f_score)
    }
}

/// Unweighted mean of per-class precision/recall/F over classes with at
/// least one true sample. Recomputed from the per-class metrics, so it
/// doubles as an independent route to the stored macro fields.
pub fn macro_average(report: &TaskReport) -> (f64, f64, f64) {
    let present: Vec<&ClassMetrics> = report.per_class.iter().filter(|c| c.support > 0).collect();
    let denom = present.len().max(1) as f64;
    (
        present.iter().map(|c| c.precision).sum::<f64>() / denom,
        present.iter().map(|c| c.recall).sum::<f64>() / denom,
        present.iter().map(|c| c.f_score).sum::<f64>() / denom,
    )
}

/// Output format for rendered tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
    Markdown,
}

/// Per-task macro metrics table (rows = tasks). CSV and markdown render at
/// two decimals; JSON carries full precision and re-parses exactly.
pub fn emit_task_table(reports: &[TaskReport], format: TableFormat) -> Result<String> {
    match format {
        TableFormat::Json => serde_json::to_string_pretty(reports).map_err(|e| Error::Invalid(e.to_string())),
        TableFormat::Csv => {
            let mut out = String::from("task,precision,recall,f_score\n");
            for r in reports {
                out.push_str(&format!(
                    "{},{:.2},{:.2},{:.2}\n",
                    r.task_index, r.macro_precision, r.macro_recall, r.macro_f
                ));
            }
            Ok(out)
        }
        TableFormat::Markdown => {
            let mut out = String::from("| Task | Precision | Recall | F-score |\n|---|---|---|---|\n");
            for r in reports {
                out.push_str(&format!(
                    "| {} | {:.2} | {:.2} | {:.2} |\n",
                    r.task_index, r.macro_precision, r.macro_recall, r.macro_f
                ));
            }
            Ok(out)
        }
    }
}

/// Forgetting table: rows = classes, columns = tasks, cell = that class's
/// F-score at that task, an em-dash before the class is introduced.
pub fn emit_forgetting_table(reports: &[TaskReport], format: TableFormat) -> Result<String> {
    // union of classes in introduction order (later reports extend earlier)
    let mut classes: Vec<char> = Vec::new();
    for r in reports {
        for &c in &r.class_symbols {
            if !classes.contains(&c) {
                classes.push(c);
            }
        }
    }
    let cell = |class: char, r: &TaskReport| -> Option<f64> { r.class_f(class) };
    match format {
        TableFormat::Json => {
            let rows: Vec<serde_json::Value> = classes
                .iter()
                .map(|&c| {
                    let cells: Vec<serde_json::Value> = reports
                        .iter()
                        .map(|r| match cell(c, r) {
                            Some(f) => serde_json::json!(f),
                            None => serde_json::Value::Null,
                        })
                        .collect();
                    serde_json::json!({ "class": c.to_string(), "f_by_task": cells })
                })
                .collect();
            serde_json::to_string_pretty(&rows).map_err(|e| Error::Invalid(e.to_string()))
        }
        TableFormat::Csv => {
            let mut out = String::from("class");
            for r in reports {
                out.push_str(&format!(",task_{}", r.task_index));
            }
            out.push('\n');
            for &c in &classes {
                out.push(c);
                for r in reports {
                    match cell(c, r) {
                        Some(f) => out.push_str(&format!(",{f:.2}")),
                        None => out.push_str(",—"),
                    }
                }
                out.push('\n');
            }
            Ok(out)
        }
        TableFormat::Markdown => {
            let mut out = String::from("| Class |");
            for r in reports {
                out.push_str(&format!(" Task {} |", r.task_index));
            }
            out.push_str("\n|---|");
            out.push_str(&"---|".repeat(reports.len()));
            out.push('\n');
            for &c in &classes {
                out.push_str(&format!("| {c} |"));
                for r in reports {
                    match cell(c, r) {
                        Some(f) => out.push_str(&format!(" {f:.2} |")),
                        None => out.push_str(" — |"),
                    }
                }
                out.push('\n');
            }
            Ok(out)
        }
    }
}
