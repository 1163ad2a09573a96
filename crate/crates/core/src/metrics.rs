//! Confusion matrices and one-vs-rest accuracy/precision, macro-averaged.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("class index {index} outside the {classes} known classes")]
    UnknownClass { index: usize, classes: usize },
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("malformed confusion CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for MetricsError {
    fn from(e: csv::Error) -> Self {
        MetricsError::Csv(e.to_string())
    }
}

/// Rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

/// Macro-averaged one-vs-rest metrics, plus the per-class values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_precision: Vec<f64>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        Self { classes, counts: vec![vec![0; n]; n] }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let n = classes.len();
        if counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(MetricsError::Csv(format!("matrix is not {n}x{n}")));
        }
        Ok(Self { classes, counts })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn column_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    /// Fraction of frames on the diagonal.
    pub fn overall_accuracy(&self) -> f64 {
        let diag: u64 = (0..self.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total() as f64
    }

    /// Fraction of class-`class` frames predicted as that class.
    pub fn recall(&self, class: usize) -> f64 {
        self.counts[class][class] as f64 / self.row_sum(class) as f64
    }

    /// CSV with a header row of predicted labels and one row per actual label.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["actual\\predicted".to_string()];
        header.extend(self.classes.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in self.classes.iter().zip(&self.counts) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, MetricsError> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
        let classes: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut counts = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.get(0) != classes.get(i).map(String::as_str) {
                return Err(MetricsError::Csv(format!("row {i} label {:?} does not match header", rec.get(0))));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|c| c.parse::<u64>().map_err(|e| MetricsError::Csv(format!("row {i}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            counts.push(row);
        }
        Self::from_counts(classes, counts)
    }
}

/// Tally actual-vs-predicted class indices.
pub fn confusion(predictions: &[usize], labels: &[usize], classes: &[String]) -> Result<ConfusionMatrix, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    let mut m = ConfusionMatrix::new(classes.to_vec());
    let n = classes.len();
    for (&p, &a) in predictions.iter().zip(labels) {
        for index in [p, a] {
            if index >= n {
                return Err(MetricsError::UnknownClass { index, classes: n });
            }
        }
        m.counts[a][p] += 1;
    }
    Ok(m)
}

/// Per-class `(TP+TN)/total` and `TP/(TP+FP)`, averaged without weights.
/// A class nobody predicted contributes precision 0.
pub fn accuracy_precision(m: &ConfusionMatrix) -> Result<ClassMetrics, MetricsError> {
    let total = m.total();
    if m.is_empty() || total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let n = m.len();
    let mut per_class_accuracy = Vec::with_capacity(n);
    let mut per_class_precision = Vec::with_capacity(n);
    for c in 0..n {
        let tp = m.counts[c][c];
        let fp = m.column_sum(c) - tp;
        let fn_ = m.row_sum(c) - tp;
        let tn = total - tp - fp - fn_;
        per_class_accuracy.push((tp + tn) as f64 / total as f64);
        per_class_precision.push(if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(ClassMetrics {
        accuracy: mean(&per_class_accuracy),
        precision: mean(&per_class_precision),
        per_class_accuracy,
        per_class_precision,
    })
}
