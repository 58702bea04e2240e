//! Evaluation metrics: micro/macro F1 for multi-label predictions and
//! overall pixel accuracy for segmentation.

/// Confusion counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// `2TP / (2TP + FP + FN)`, or 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Multi-label F1 scores from probabilities thresholded at `threshold`.
///
/// `probs` and `targets` are `[n, classes]` row-major; targets are 0/1.
pub fn multilabel_f1(
    probs: &[f64],
    targets: &[u8],
    classes: usize,
    threshold: f64,
) -> (f64, f64) {
    assert_eq!(probs.len(), targets.len());
    assert!(classes > 0 && probs.len().is_multiple_of(classes));
    let mut per_class = vec![Counts::default(); classes];
    for (row_p, row_t) in probs.chunks(classes).zip(targets.chunks(classes)) {
        for k in 0..classes {
            let predicted = row_p[k] >= threshold;
            let actual = row_t[k] == 1;
            match (predicted, actual) {
                (true, true) => per_class[k].tp += 1,
                (true, false) => per_class[k].fp += 1,
                (false, true) => per_class[k].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let micro = per_class
        .iter()
        .fold(Counts::default(), |acc, c| Counts {
            tp: acc.tp + c.tp,
            fp: acc.fp + c.fp,
            fn_: acc.fn_ + c.fn_,
        })
        .f1();
    let macro_f1 = per_class.iter().map(Counts::f1).sum::<f64>() / classes as f64;
    (micro, macro_f1)
}

/// Fraction of pixels whose argmax class matches the target.
///
/// `logits` is `[pixels, classes]` row-major over all evaluated pixels.
pub fn overall_accuracy(logits: &[f64], targets: &[u16], classes: usize) -> f64 {
    assert!(classes > 0);
    assert_eq!(logits.len(), targets.len() * classes);
    if targets.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for (row, &t) in logits.chunks(classes).zip(targets) {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (k, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        if best == t as usize {
            correct += 1;
        }
    }
    correct as f64 / targets.len() as f64
}

/// Population standard deviation; 0 for a single value.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let targets = vec![1u8, 0, 0, 1, 1, 1];
        let probs = vec![0.9, 0.1, 0.2, 0.8, 0.7, 0.95];
        let (micro, macro_f1) = multilabel_f1(&probs, &targets, 2, 0.5);
        assert_eq!(micro, 1.0);
        assert_eq!(macro_f1, 1.0);
    }

    #[test]
    fn all_negative_on_balanced_labels_is_zero_micro() {
        let targets = vec![1u8, 0, 0, 1];
        let probs = vec![0.1, 0.2, 0.3, 0.4];
        let (micro, _) = multilabel_f1(&probs, &targets, 2, 0.5);
        assert_eq!(micro, 0.0);
    }

    #[test]
    fn f1_matches_hand_confusion_counts() {
        // 3 samples x 2 classes.
        // class 0: pred [1,1,0], true [1,0,0] -> tp=1 fp=1 fn=0 -> f1 = 2/3
        // class 1: pred [0,1,1], true [1,1,1] -> tp=2 fp=0 fn=1 -> f1 = 4/5
        let probs = vec![0.9, 0.1, 0.8, 0.9, 0.2, 0.7];
        let targets = vec![1u8, 1, 0, 1, 0, 1];
        let (micro, macro_f1) = multilabel_f1(&probs, &targets, 2, 0.5);
        let micro_want = 2.0 * 3.0 / (2.0 * 3.0 + 1.0 + 1.0);
        assert!((micro - micro_want).abs() < 1e-15);
        assert!((macro_f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn oa_counts_argmax_matches() {
        // 4 pixels, 3 classes
        let logits = vec![
            1.0, 0.0, 0.0, // -> 0 (correct)
            0.0, 2.0, 0.0, // -> 1 (correct)
            0.0, 0.0, 3.0, // -> 2 (wrong, target 1)
            5.0, 0.0, 1.0, // -> 0 (correct)
        ];
        let targets = vec![0u16, 1, 1, 0];
        assert_eq!(overall_accuracy(&logits, &targets, 3), 0.75);
    }

    #[test]
    fn std_of_three_seed_metrics() {
        let (mean, std) = mean_and_std(&[0.5, 0.6, 0.7]);
        assert!((mean - 0.6).abs() < 1e-15);
        assert!((std - 0.0816496580927726).abs() < 1e-12);
        let (m1, s1) = mean_and_std(&[0.42]);
        assert_eq!((m1, s1), (0.42, 0.0));
    }
}
