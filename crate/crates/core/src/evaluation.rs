//! Grading and localization metrics.

use serde::{Deserialize, Serialize};

use crate::data_model::SeverityGrade;
use crate::error::{Error, Result};

/// Rows are true grades, columns predicted grades.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix3 {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix3 {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, t: usize) -> u64 {
        self.counts[t].iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion_matrix(preds: &[SeverityGrade], labels: &[SeverityGrade]) -> Result<ConfusionMatrix3> {
    if preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty prediction set".into()));
    }
    let mut cm = ConfusionMatrix3::default();
    for (p, t) in preds.iter().zip(labels) {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

/// Recall per true grade; `None` where the grade never occurs.
pub fn per_class_recall(cm: &ConfusionMatrix3) -> [Option<f64>; 3] {
    std::array::from_fn(|t| {
        let n = cm.row_sum(t);
        (n > 0).then(|| cm.counts[t][t] as f64 / n as f64)
    })
}

/// Mean of the defined recalls; `None` if no grade occurs. Absent grades are
/// logged and skipped.
pub fn balanced_accuracy(cm: &ConfusionMatrix3) -> Option<f64> {
    let recalls = per_class_recall(cm);
    let defined: Vec<f64> = recalls.iter().flatten().copied().collect();
    if defined.len() < recalls.len() {
        let missing: Vec<&str> = recalls
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_none())
            .map(|(i, _)| SeverityGrade::ALL[i].as_str())
            .collect();
        log::warn!("no {missing:?} samples; excluded from balanced accuracy");
    }
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn accuracy(cm: &ConfusionMatrix3) -> Option<f64> {
    let n = cm.total();
    (n > 0).then(|| cm.trace() as f64 / n as f64)
}

/// Fraction of truly severe discs predicted normal; `None` without severe discs.
pub fn severe_to_normal_rate(cm: &ConfusionMatrix3) -> Option<f64> {
    let (s, n) = (SeverityGrade::Severe.index(), SeverityGrade::Normal.index());
    let denom = cm.row_sum(s);
    (denom > 0).then(|| cm.counts[s][n] as f64 / denom as f64)
}

/// Every classification metric derived from one confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeMetrics {
    pub confusion: ConfusionMatrix3,
    pub n: u64,
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub recall: [Option<f64>; 3],
    pub severe_to_normal_rate: Option<f64>,
    pub severe_to_normal_count: u64,
    pub severe_count: u64,
}

impl GradeMetrics {
    pub fn from_confusion(cm: ConfusionMatrix3) -> Self {
        GradeMetrics {
            confusion: cm,
            n: cm.total(),
            accuracy: accuracy(&cm),
            balanced_accuracy: balanced_accuracy(&cm),
            recall: per_class_recall(&cm),
            severe_to_normal_rate: severe_to_normal_rate(&cm),
            severe_to_normal_count: cm.counts[2][0],
            severe_count: cm.row_sum(2),
        }
    }

    pub fn compute(preds: &[SeverityGrade], labels: &[SeverityGrade]) -> Result<Self> {
        Ok(Self::from_confusion(confusion_matrix(preds, labels)?))
    }
}

/// Balanced accuracy of always predicting the most frequent training grade,
/// evaluated on `labels`.
pub fn majority_baseline(train_labels: &[SeverityGrade], labels: &[SeverityGrade]) -> Result<GradeMetrics> {
    let mut freq = [0usize; 3];
    for g in train_labels {
        freq[g.index()] += 1;
    }
    // Ties go to the less severe grade, as in prediction.
    let mut best = 0;
    for i in 1..3 {
        if freq[i] > freq[best] {
            best = i;
        }
    }
    let pred = SeverityGrade::ALL[best];
    GradeMetrics::compute(&vec![pred; labels.len()], labels)
}

/// `sqrt(mean over points of (dx^2 + dy^2) / 2)`: the per-coordinate RMSE.
pub fn coordinate_rmse(preds: &[(f64, f64)], targets: &[(f64, f64)]) -> Result<f64> {
    check_points(preds, targets)?;
    let s: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| ((p.0 - t.0).powi(2) + (p.1 - t.1).powi(2)) / 2.0)
        .sum();
    Ok((s / preds.len() as f64).sqrt())
}

/// `sqrt(mean over points of (dx^2 + dy^2))`: RMS Euclidean error, reported
/// alongside [`coordinate_rmse`].
pub fn euclidean_rmse(preds: &[(f64, f64)], targets: &[(f64, f64)]) -> Result<f64> {
    Ok(coordinate_rmse(preds, targets)? * std::f64::consts::SQRT_2)
}

fn check_points(preds: &[(f64, f64)], targets: &[(f64, f64)]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::Data(format!(
            "{} predicted points for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("cannot compute RMSE of zero points".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use SeverityGrade::*;

    #[test]
    fn single_severe_as_normal() {
        let cm = confusion_matrix(&[Normal], &[Severe]).unwrap();
        assert_eq!(cm.counts, [[0, 0, 0], [0, 0, 0], [1, 0, 0]]);
        assert!(confusion_matrix(&[Normal], &[]).is_err());
    }

    #[test]
    fn recall_balanced_accuracy_and_s2n_arithmetic() {
        let cm = ConfusionMatrix3 {
            counts: [[3, 1, 0], [0, 0, 0], [1, 1, 2]],
        };
        let r = per_class_recall(&cm);
        assert_eq!(r, [Some(0.75), None, Some(0.5)]);
        assert_eq!(balanced_accuracy(&cm), Some(0.625));
        assert_eq!(severe_to_normal_rate(&cm), Some(0.25));

        let cm = ConfusionMatrix3 {
            counts: [[9, 1, 0], [2, 6, 2], [0, 4, 6]],
        };
        assert!((balanced_accuracy(&cm).unwrap() - 0.7).abs() < 1e-12);

        let cm = ConfusionMatrix3 {
            counts: [[0, 0, 0], [0, 0, 0], [2, 0, 92]],
        };
        assert!((severe_to_normal_rate(&cm).unwrap() - 0.0213).abs() < 1e-4);
        assert_eq!(severe_to_normal_rate(&ConfusionMatrix3::default()), None);
    }

    #[test]
    fn rmse_formula() {
        assert_eq!(coordinate_rmse(&[(1.0, 2.0)], &[(1.0, 2.0)]).unwrap(), 0.0);
        let r = coordinate_rmse(&[(3.0, 4.0)], &[(0.0, 0.0)]).unwrap();
        assert!((r - 3.5355339).abs() < 1e-6);
        assert!((euclidean_rmse(&[(3.0, 4.0)], &[(0.0, 0.0)]).unwrap() - 5.0).abs() < 1e-12);
        let r2 = coordinate_rmse(&[(6.0, 8.0)], &[(0.0, 0.0)]).unwrap();
        assert!((r2 - 2.0 * r).abs() < 1e-12);
    }

    #[test]
    fn majority_baseline_predicts_most_frequent() {
        let m = majority_baseline(&[Normal, Normal, Severe], &[Normal, Moderate, Severe]).unwrap();
        assert_eq!(m.recall, [Some(1.0), Some(0.0), Some(0.0)]);
        assert!((m.balanced_accuracy.unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }
}
