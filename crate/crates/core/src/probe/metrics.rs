use crate::error::{Error, Result};

/// Test-set metrics of one fold, as percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Overall accuracy.
    pub wa: f64,
    /// Mean per-class recall over classes present in the truth.
    pub ua: f64,
    /// Support-weighted mean of per-class F1.
    pub wf1: f64,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub n_test: usize,
    pub labels: Vec<String>,
    /// Classes of the label set with no test instance; left out of UA.
    pub absent_classes: Vec<usize>,
}

pub fn compute_metrics(y_true: &[usize], y_pred: &[usize], label_set: &[String]) -> Result<MetricsReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Metrics(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Metrics("no test instances".into()));
    }
    let c = label_set.len();
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&y| y >= c) {
        return Err(Error::Metrics(format!("label index {bad} outside a set of {c} classes")));
    }
    let mut confusion = vec![vec![0usize; c]; c];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        confusion[t][p] += 1;
    }
    let n = y_true.len() as f64;
    let support: Vec<usize> = confusion.iter().map(|row| row.iter().sum()).collect();
    let predicted: Vec<usize> = (0..c).map(|j| confusion.iter().map(|row| row[j]).sum()).collect();
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();

    let mut recall_sum = 0.0;
    let mut present = 0usize;
    let mut wf1 = 0.0;
    let mut absent_classes = Vec::new();
    for k in 0..c {
        if support[k] == 0 {
            absent_classes.push(k);
            continue;
        }
        let tp = confusion[k][k] as f64;
        let recall = tp / support[k] as f64;
        let precision = if predicted[k] == 0 { 0.0 } else { tp / predicted[k] as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        recall_sum += recall;
        present += 1;
        wf1 += support[k] as f64 / n * f1;
    }
    Ok(MetricsReport {
        wa: 100.0 * correct as f64 / n,
        ua: 100.0 * recall_sum / present as f64,
        wf1: 100.0 * wf1,
        confusion,
        n_test: y_true.len(),
        labels: label_set.to_vec(),
        absent_classes,
    })
}
