//! Recall-based evaluation: confusion matrix, overall accuracy (weighted
//! average recall), and macro-averaged per-class recall (unweighted average
//! recall), all in percent.

use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<u64>>,
    /// Percent recall per class; `None` for classes absent from the labels.
    pub per_class_recall: Vec<Option<f64>>,
    /// Weighted average recall == overall accuracy, percent.
    pub war: f64,
    /// Unweighted mean of present-class recalls, percent.
    pub uar: f64,
    /// Classes with no labeled samples, excluded from the UAR.
    pub excluded_classes: Vec<usize>,
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize], k: usize) -> Result<MetricsReport> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(HarnessError::Data(format!(
            "need equal nonzero prediction/label counts, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= k || p >= k {
            return Err(HarnessError::Data(format!(
                "class index out of range: predicted {p}, label {l}, k {k}"
            )));
        }
        confusion[l][p] += 1;
    }
    Ok(from_confusion(confusion))
}

/// Metrics from an existing confusion matrix (rows = true class).
pub fn from_confusion(confusion: Vec<Vec<u64>>) -> MetricsReport {
    let k = confusion.len();
    let total: u64 = confusion.iter().map(|row| row.iter().sum::<u64>()).sum();
    let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let mut per_class_recall = Vec::with_capacity(k);
    let mut excluded_classes = Vec::new();
    let mut recall_sum = 0.0;
    let mut present = 0usize;
    for (i, row) in confusion.iter().enumerate() {
        let n: u64 = row.iter().sum();
        if n == 0 {
            per_class_recall.push(None);
            excluded_classes.push(i);
        } else {
            let r = 100.0 * confusion[i][i] as f64 / n as f64;
            per_class_recall.push(Some(r));
            recall_sum += r;
            present += 1;
        }
    }
    MetricsReport {
        war: 100.0 * correct as f64 / total as f64,
        uar: if present > 0 { recall_sum / present as f64 } else { 0.0 },
        confusion,
        per_class_recall,
        excluded_classes,
    }
}
