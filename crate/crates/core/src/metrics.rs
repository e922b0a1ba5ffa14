//! Confusion-matrix classification metrics.
//!
//! Precision, recall and F1 are reported per class and under three
//! averaging schemes: weighted (by support), micro (pooled counts) and macro
//! (unweighted mean). Undefined ratios (0/0) are reported as 0 and flagged on
//! the class entry.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("predictions ({preds}) and labels ({labels}) differ in length")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("empty confusion matrix")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 {
            return Err(MetricsError::Empty);
        }
        if let Some(row) = counts.iter().find(|r| r.len() != c) {
            return Err(MetricsError::ClassOutOfRange {
                class: row.len(),
                classes: c,
            });
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() || classes == 0 {
        return Err(MetricsError::Empty);
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &t) in preds.iter().zip(labels) {
        if let Some(class) = [p, t].into_iter().find(|&c| c >= classes) {
            return Err(MetricsError::ClassOutOfRange { class, classes });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when any of the three ratios was 0/0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_division: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub weighted: Averages,
    pub micro: Averages,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn f1(p: f64, r: f64) -> (f64, bool) {
    if p + r == 0.0 {
        (0.0, true)
    } else {
        (2.0 * p * r / (p + r), false)
    }
}

/// Report with class labels `"0"`, `"1"`, ...
pub fn compute(matrix: &ConfusionMatrix) -> Result<MetricsReport> {
    let labels: Vec<String> = (0..matrix.classes()).map(|i| i.to_string()).collect();
    compute_with_labels(matrix, &labels)
}

pub fn compute_with_labels<S: AsRef<str>>(matrix: &ConfusionMatrix, labels: &[S]) -> Result<MetricsReport> {
    let c = matrix.classes();
    let total = matrix.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = matrix.counts[k][k];
        let predicted: u64 = (0..c).map(|t| matrix.counts[t][k]).sum();
        let support: u64 = matrix.counts[k].iter().sum();
        let (precision, zp) = ratio(tp, predicted);
        let (recall, zr) = ratio(tp, support);
        let (f, zf) = f1(precision, recall);
        per_class.push(ClassMetrics {
            label: labels.get(k).map_or_else(|| k.to_string(), |s| s.as_ref().to_string()),
            precision,
            recall,
            f1: f,
            support,
            zero_division: zp || zr || zf,
        });
    }

    let n = total as f64;
    let mut weighted = Averages::default();
    let mut macro_avg = Averages::default();
    for m in &per_class {
        let w = m.support as f64;
        weighted.precision += w * m.precision;
        weighted.recall += w * m.recall;
        weighted.f1 += w * m.f1;
        macro_avg.precision += m.precision;
        macro_avg.recall += m.recall;
        macro_avg.f1 += m.f1;
    }
    for v in [&mut weighted.precision, &mut weighted.recall, &mut weighted.f1] {
        *v /= n;
    }
    for v in [&mut macro_avg.precision, &mut macro_avg.recall, &mut macro_avg.f1] {
        *v /= c as f64;
    }

    // Pooled over classes every misclassification is one FP and one FN.
    let tp = matrix.trace();
    let errors = total - tp;
    let (mp, _) = ratio(tp, tp + errors);
    let (mr, _) = ratio(tp, tp + errors);
    let (mf, _) = f1(mp, mr);

    Ok(MetricsReport {
        accuracy: tp as f64 / n,
        per_class,
        weighted,
        micro: Averages {
            precision: mp,
            recall: mr,
            f1: mf,
        },
        macro_avg,
        confusion: matrix.counts.clone(),
    })
}

/// Row labels of the ablation metric column, top to bottom.
pub const ABLATION_ROWS: [&str; 6] = [
    "Accuracy",
    "Weighted Precision",
    "Weighted Recall",
    "Weighted F1 Score",
    "Micro Precision",
    "Micro Recall",
];

/// Row labels of the test-result panel, top to bottom.
pub const TABLE3_ROWS: [&str; 4] = ["Recall", "Precision", "F1 Score", "Accuracy"];

impl MetricsReport {
    /// Values in [`ABLATION_ROWS`] order.
    pub fn ablation_values(&self) -> [f64; 6] {
        [
            self.accuracy,
            self.weighted.precision,
            self.weighted.recall,
            self.weighted.f1,
            self.micro.precision,
            self.micro.recall,
        ]
    }

    /// Values in [`TABLE3_ROWS`] order, P/R/F1 macro-averaged.
    pub fn table3_values(&self) -> [f64; 4] {
        [
            self.macro_avg.recall,
            self.macro_avg.precision,
            self.macro_avg.f1,
            self.accuracy,
        ]
    }

    pub fn weighted_f1(&self) -> f64 {
        self.weighted.f1
    }

    /// Every scalar lies in [0, 1].
    pub fn in_unit_range(&self) -> bool {
        let avgs = [self.weighted, self.micro, self.macro_avg];
        std::iter::once(self.accuracy)
            .chain(avgs.iter().flat_map(|a| [a.precision, a.recall, a.f1]))
            .chain(self.per_class.iter().flat_map(|m| [m.precision, m.recall, m.f1]))
            .all(|v| (0.0..=1.0).contains(&v))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportStyle {
    Table3,
    AblationRow,
    Json,
}

fn panel(rows: &[&str], values: &[f64]) -> String {
    let mut out = String::from("| Metric | Value |\n| --- | --- |\n");
    for (name, v) in rows.iter().zip(values) {
        out.push_str(&format!("| {name} | {v:.4} |\n"));
    }
    out
}

pub fn render(report: &MetricsReport, style: ReportStyle) -> String {
    match style {
        ReportStyle::Table3 => panel(&TABLE3_ROWS, &report.table3_values()),
        ReportStyle::AblationRow => panel(&ABLATION_ROWS, &report.ablation_values()),
        ReportStyle::Json => report.to_json(),
    }
}
