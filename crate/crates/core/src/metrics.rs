//! Confusion matrices and accuracy / precision / recall / F1.
//!
//! Per-class scores are one-vs-rest; macro scores are the unweighted mean
//! over all classes in the class order. Any 0/0 ratio is reported as 0.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn empty(classes: &[String]) -> Self {
        Self {
            classes: classes.to_vec(),
            counts: vec![vec![0; classes.len()]; classes.len()],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let n = self.n_classes();
        for label in [truth, predicted] {
            if label >= n {
                return Err(Error::LabelOutOfRange { label, n_classes: n });
            }
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Rows scaled to sum to one; rows without samples stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect()
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], classes: &[String]) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(shape_err(
            "confusion",
            format!("{} truths vs {} predictions", truth.len(), predicted.len()),
        ));
    }
    if truth.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut cm = ConfusionMatrix::empty(classes);
    for (&t, &p) in truth.iter().zip(predicted) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 || cm.n_classes() == 0 {
        return Err(Error::NoSamples);
    }
    let n = cm.n_classes();
    let per_class: Vec<ClassMetrics> = (0..n)
        .map(|c| {
            let tp = cm.counts[c][c];
            let predicted: u64 = (0..n).map(|t| cm.counts[t][c]).sum();
            let actual: u64 = cm.counts[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            ClassMetrics {
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: actual,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n as f64;
    Ok(MetricsReport {
        accuracy: ratio(cm.trace(), total),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
        confusion: cm.clone(),
    })
}

/// Confusion matrix and report in one call.
pub fn evaluate_labels(truth: &[usize], predicted: &[usize], classes: &[String]) -> Result<MetricsReport> {
    report(&confusion(truth, predicted, classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let cm = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], &names(3)).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let r = report(&cm).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!((r.macro_precision, r.macro_recall, r.macro_f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_tally() {
        let cm = confusion(&[0, 0, 1], &[0, 1, 1], &names(2)).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
    }

    #[test]
    fn empty_and_bad_inputs() {
        assert!(matches!(confusion(&[], &[], &names(2)), Err(Error::NoSamples)));
        assert!(confusion(&[0], &[0, 1], &names(2)).is_err());
        assert!(confusion(&[0], &[5], &names(2)).is_err());
        assert!(report(&ConfusionMatrix::empty(&names(2))).is_err());
    }

    #[test]
    fn two_class_worked_example() {
        let cm = ConfusionMatrix {
            classes: names(2),
            counts: vec![vec![2, 1], vec![0, 1]],
        };
        let r = report(&cm).unwrap();
        assert_eq!(r.per_class[0].precision, 1.0);
        assert!((r.per_class[0].recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class[0].f1 - 0.8).abs() < 1e-15);
        assert_eq!(r.per_class[1].precision, 0.5);
        assert_eq!(r.per_class[1].recall, 1.0);
        assert!((r.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.accuracy, 0.75);
    }

    #[test]
    fn absent_class_scores_zero() {
        let cm = confusion(&[0, 1], &[0, 1], &names(3)).unwrap();
        let r = report(&cm).unwrap();
        assert_eq!(
            r.per_class[2],
            ClassMetrics {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
                support: 0
            }
        );
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn normalized_rows_sum_to_one() {
        let cm = confusion(&[0, 0, 0, 1, 1], &[0, 1, 1, 1, 0], &names(3)).unwrap();
        let norm = cm.normalized();
        for (row, counts) in norm.iter().zip(&cm.counts) {
            let s: f64 = row.iter().sum();
            if counts.iter().sum::<u64>() > 0 {
                assert!((s - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(s, 0.0);
            }
        }
    }
}
