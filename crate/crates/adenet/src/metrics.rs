//! Binary classification metrics: confusion matrices, macro-averaged
//! precision/recall/F1, ROC AUC, false-negative rate, and fold averaging.
//! Damaged is the positive class throughout.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("labels and predictions have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("labels contain only one class")]
    SingleClass,
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix2 {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl ConfusionMatrix2 {
    pub fn new(tp: usize, fn_: usize, fp: usize, tn: usize) -> Self {
        ConfusionMatrix2 { tp, fn_, fp, tn }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn add(&mut self, other: &ConfusionMatrix2) {
        self.tp += other.tp;
        self.fn_ += other.fn_;
        self.fp += other.fp;
        self.tn += other.tn;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc_auc: Option<f64>,
    pub fn_rate: f64,
    pub damaged: ClassMetrics,
    pub undamaged: ClassMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (false positive rate, true positive rate) points, monotone from
    /// (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
}

pub fn confusion(labels: &[usize], predictions: &[usize]) -> Result<ConfusionMatrix2, MetricsError> {
    if labels.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch(labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut m = ConfusionMatrix2::default();
    for (&y, &p) in labels.iter().zip(predictions.iter()) {
        if y > 1 || p > 1 {
            return Err(MetricsError::OutOfRange(format!("label {y} / pred {p}")));
        }
        match (y, p) {
            (1, 1) => m.tp += 1,
            (1, 0) => m.fn_ += 1,
            (0, 1) => m.fp += 1,
            (0, 0) => m.tn += 1,
            _ => unreachable!(),
        }
    }
    Ok(m)
}

fn prf(tp: f64, fp: f64, fn_: f64) -> (f64, f64, f64) {
    // 0/0 cases are defined as 0 so fold aggregation stays total
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Accuracy plus per-class and macro-averaged (unweighted two-class mean)
/// precision/recall/F1. AUC is left unset; attach it separately when scores
/// are available.
pub fn metrics_from_confusion(m: &ConfusionMatrix2) -> Result<MetricsReport, MetricsError> {
    let total = m.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let (tp, fn_, fp, tn) = (m.tp as f64, m.fn_ as f64, m.fp as f64, m.tn as f64);
    let (p_pos, r_pos, f_pos) = prf(tp, fp, fn_);
    // negative class: tn plays tp, fn plays fp, fp plays fn
    let (p_neg, r_neg, f_neg) = prf(tn, fn_, fp);
    Ok(MetricsReport {
        accuracy: (tp + tn) / total as f64,
        macro_precision: (p_pos + p_neg) / 2.0,
        macro_recall: (r_pos + r_neg) / 2.0,
        macro_f1: (f_pos + f_neg) / 2.0,
        roc_auc: None,
        fn_rate: fn_ / total as f64,
        damaged: ClassMetrics {
            precision: p_pos,
            recall: r_pos,
            f1: f_pos,
            support: m.tp + m.fn_,
        },
        undamaged: ClassMetrics {
            precision: p_neg,
            recall: r_neg,
            f1: f_neg,
            support: m.tn + m.fp,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FnRateDenominator {
    /// fn / total — the reading consistent with the source material's
    /// headline number.
    Total,
    /// fn / (fn + tp), the classical miss rate.
    Positives,
}

pub fn false_negative_rate(m: &ConfusionMatrix2, denom: FnRateDenominator) -> f64 {
    let d = match denom {
        FnRateDenominator::Total => m.total(),
        FnRateDenominator::Positives => m.fn_ + m.tp,
    };
    if d == 0 {
        0.0
    } else {
        m.fn_ as f64 / d as f64
    }
}

/// Trapezoidal AUC over all distinct score thresholds. The numerator is
/// accumulated in integer arithmetic so the result equals the Mann-Whitney
/// pairwise statistic (ties counted 1/2) exactly.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<(f64, RocCurve), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![(0.0, 0.0)];
    let mut tp_cum = 0usize;
    let mut fp_cum = 0usize;
    let mut num2 = 0u128; // 2 * sum of trapezoid areas, in count units
    let mut i = 0;
    while i < order.len() {
        // advance over a tie block so the staircase cuts ties diagonally
        let threshold = scores[order[i]];
        let (prev_tp, prev_fp) = (tp_cum, fp_cum);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp_cum += 1;
            } else {
                fp_cum += 1;
            }
            i += 1;
        }
        num2 += (fp_cum - prev_fp) as u128 * (tp_cum + prev_tp) as u128;
        points.push((fp_cum as f64 / neg as f64, tp_cum as f64 / pos as f64));
    }
    let auc = num2 as f64 / (2.0 * pos as f64 * neg as f64);
    Ok((auc, RocCurve { points }))
}

pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<MetricsReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let aucs: Vec<f64> = reports.iter().filter_map(|r| r.roc_auc).collect();
    let class_mean = |f: fn(&MetricsReport) -> &ClassMetrics| ClassMetrics {
        precision: reports.iter().map(|r| f(r).precision).sum::<f64>() / n,
        recall: reports.iter().map(|r| f(r).recall).sum::<f64>() / n,
        f1: reports.iter().map(|r| f(r).f1).sum::<f64>() / n,
        support: reports.iter().map(|r| f(r).support).sum::<usize>(),
    };
    Ok(MetricsReport {
        accuracy: mean(|r| r.accuracy),
        macro_precision: mean(|r| r.macro_precision),
        macro_recall: mean(|r| r.macro_recall),
        macro_f1: mean(|r| r.macro_f1),
        roc_auc: if aucs.is_empty() {
            None
        } else {
            Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
        },
        fn_rate: mean(|r| r.fn_rate),
        damaged: class_mean(|r| &r.damaged),
        undamaged: class_mean(|r| &r.undamaged),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn emit_report(
    report: &MetricsReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), MetricsError> {
    match format {
        ReportFormat::Json => {
            let s = serde_json::to_string_pretty(report)
                .map_err(|e| MetricsError::Serde(e.to_string()))?;
            std::fs::write(path, s)?;
        }
        ReportFormat::Csv => {
            let mut s = String::from(
                "accuracy,macro_precision,macro_recall,macro_f1,roc_auc,fn_rate\n",
            );
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                report.accuracy,
                report.macro_precision,
                report.macro_recall,
                report.macro_f1,
                report.roc_auc.map_or(String::new(), |a| a.to_string()),
                report.fn_rate
            ));
            std::fs::write(path, s)?;
        }
    }
    Ok(())
}

/// Two-column CSV ("fpr,tpr") for external plotting.
pub fn emit_roc_csv(curve: &RocCurve, path: &Path) -> Result<(), MetricsError> {
    let mut s = String::from("fpr,tpr\n");
    for (fpr, tpr) in &curve.points {
        s.push_str(&format!("{fpr},{tpr}\n"));
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_hand_cases() {
        let m = confusion(&[1, 1, 0, 0], &[1, 0, 0, 1]).unwrap();
        assert_eq!(m, ConfusionMatrix2::new(1, 1, 1, 1));

        let m = confusion(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!(m.fn_, 0);
        assert_eq!(m.fp, 0);

        let m = confusion(&[1, 1, 0], &[0, 0, 0]).unwrap();
        assert_eq!(m.tp, 0);
        assert_eq!(m.fp, 0);
    }

    #[test]
    fn confusion_rejects_bad_input() {
        assert!(matches!(
            confusion(&[1, 0], &[1]),
            Err(MetricsError::LengthMismatch(2, 1))
        ));
        assert!(matches!(confusion(&[], &[]), Err(MetricsError::Empty)));
    }

    #[test]
    fn table7_adenet_20_epochs() {
        let r = metrics_from_confusion(&ConfusionMatrix2::new(1026, 424, 213, 3962)).unwrap();
        assert!((r.accuracy - 0.8868).abs() < 0.0005);
        assert!((r.macro_precision - 0.87).abs() <= 0.02);
        assert!((r.macro_recall - 0.83).abs() <= 0.02);
        assert!((r.macro_f1 - 0.84).abs() <= 0.02);
    }

    #[test]
    fn table5_adenet_10_epochs() {
        let r = metrics_from_confusion(&ConfusionMatrix2::new(947, 503, 257, 3918)).unwrap();
        assert!((r.accuracy - 0.8649).abs() < 0.0005);
        assert!((r.macro_f1 - 0.81).abs() <= 0.02);
        assert!((r.macro_recall - 0.80).abs() <= 0.02);
    }

    #[test]
    fn perfect_matrix_gives_ones() {
        let r = metrics_from_confusion(&ConfusionMatrix2::new(10, 0, 0, 20)).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_precision, 1.0);
        assert_eq!(r.macro_recall, 1.0);
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn macro_f1_is_mean_of_class_f1() {
        let r = metrics_from_confusion(&ConfusionMatrix2::new(7, 3, 5, 25)).unwrap();
        assert!((r.macro_f1 - (r.damaged.f1 + r.undamaged.f1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn scale_invariance() {
        let base = ConfusionMatrix2::new(7, 3, 5, 25);
        let r1 = metrics_from_confusion(&base).unwrap();
        for k in [2usize, 3, 10] {
            let r2 = metrics_from_confusion(&ConfusionMatrix2::new(
                7 * k,
                3 * k,
                5 * k,
                25 * k,
            ))
            .unwrap();
            assert!((r1.accuracy - r2.accuracy).abs() < 1e-12);
            assert!((r1.macro_f1 - r2.macro_f1).abs() < 1e-12);
            assert!((r1.macro_precision - r2.macro_precision).abs() < 1e-12);
        }
    }

    #[test]
    fn fn_rate_matches_abstract() {
        let m = ConfusionMatrix2::new(1026, 424, 213, 3962);
        let rate = false_negative_rate(&m, FnRateDenominator::Total);
        assert!((rate - 424.0 / 5625.0).abs() < 1e-12);
        assert!((0.065..=0.085).contains(&rate));
        // miss-rate variant
        let miss = false_negative_rate(&m, FnRateDenominator::Positives);
        assert!((miss - 424.0 / 1450.0).abs() < 1e-12);
    }

    #[test]
    fn fn_rate_extremes() {
        assert_eq!(
            false_negative_rate(&ConfusionMatrix2::new(5, 0, 0, 5), FnRateDenominator::Total),
            0.0
        );
        // all positives missed, positives are 1/4 of total
        let m = ConfusionMatrix2::new(0, 25, 0, 75);
        assert_eq!(false_negative_rate(&m, FnRateDenominator::Total), 0.25);
        assert_eq!(false_negative_rate(&m, FnRateDenominator::Positives), 1.0);
    }

    #[test]
    fn auc_separable_and_ties() {
        let (auc, _) = roc_auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(auc, 1.0);
        let (auc, _) = roc_auc(&[0.5; 6], &[1, 0, 1, 0, 1, 0]).unwrap();
        assert_eq!(auc, 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(MetricsError::SingleClass)
        ));
    }

    /// Brute-force Mann-Whitney: fraction of (positive, negative) pairs where
    /// the positive outscores the negative, ties counted half.
    fn mann_whitney(scores: &[f64], labels: &[usize]) -> f64 {
        let mut num2 = 0u128;
        let mut pairs = 0u128;
        for i in 0..scores.len() {
            if labels[i] != 1 {
                continue;
            }
            for j in 0..scores.len() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1;
                if scores[i] > scores[j] {
                    num2 += 2;
                } else if scores[i] == scores[j] {
                    num2 += 1;
                }
            }
        }
        num2 as f64 / (2.0 * pairs as f64)
    }

    #[test]
    fn auc_equals_mann_whitney_exactly() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for _ in 0..200 {
            let n = rng.gen_range(4..64);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..20) as f64) / 20.0) // coarse grid forces ties
                .collect();
            let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let (auc, _) = roc_auc(&scores, &labels).unwrap();
            assert_eq!(auc, mann_whitney(&scores, &labels));
        }
    }

    #[test]
    fn auc_flip_symmetry() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..40).map(|_| rng.gen()).collect();
        let mut labels: Vec<usize> = (0..40).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let flipped: Vec<usize> = labels.iter().map(|&l| 1 - l).collect();
        let (a, _) = roc_auc(&scores, &labels).unwrap();
        let (b, _) = roc_auc(&scores, &flipped).unwrap();
        assert_eq!(a + b, 1.0);
    }

    #[test]
    fn roc_curve_is_monotone_staircase() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let scores: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let mut labels: Vec<usize> = (0..30).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let (_, curve) = roc_auc(&scores, &labels).unwrap();
        assert_eq!(curve.points[0], (0.0, 0.0));
        assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
        for w in curve.points.windows(2) {
            assert!(w[1].0 >= w[0].0);
            assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn fold_aggregation() {
        let r1 = metrics_from_confusion(&ConfusionMatrix2::new(10, 0, 0, 20)).unwrap();
        let avg = aggregate_folds(&[r1.clone(), r1.clone()]).unwrap();
        assert_eq!(avg.accuracy, r1.accuracy);
        let mut r2 = r1.clone();
        r2.accuracy = 0.8;
        let mut r3 = r1.clone();
        r3.accuracy = 0.9;
        let avg = aggregate_folds(&[r2, r3]).unwrap();
        assert!((avg.accuracy - 0.85).abs() < 1e-12);
        assert!(aggregate_folds(&[]).is_err());
    }

    #[test]
    fn emit_and_parse_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = metrics_from_confusion(&ConfusionMatrix2::new(7, 3, 5, 25)).unwrap();
        let p = dir.path().join("report.json");
        emit_report(&r, ReportFormat::Json, &p).unwrap();
        let back: MetricsReport =
            serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(back, r);

        let pc = dir.path().join("report.csv");
        emit_report(&r, ReportFormat::Csv, &pc).unwrap();
        let text = std::fs::read_to_string(&pc).unwrap();
        assert_eq!(text.lines().count(), 2); // header + one data row

        let (_, curve) = roc_auc(&[0.9, 0.1], &[1, 0]).unwrap();
        let pr = dir.path().join("roc.csv");
        emit_roc_csv(&curve, &pr).unwrap();
        let text = std::fs::read_to_string(&pr).unwrap();
        assert!(text.starts_with("fpr,tpr\n"));
    }
}
