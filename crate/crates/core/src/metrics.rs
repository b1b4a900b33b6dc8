//! Evaluation metrics: confusion matrix, accuracy (GAcc on clean data,
//! RAcc on adversarially perturbed copies), macro precision/recall/F1,
//! non-interpolated average precision, and mAP/mARP.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.classes + pred_class]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Contract(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= classes || p >= classes {
            return Err(Error::Contract(format!(
                "label pair ({t}, {p}) out of range for {classes} classes"
            )));
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

/// Multiclass accuracy: trace over total. On clean data this is GAcc; on an
/// adversarially perturbed copy of the same data it is RAcc.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<Real> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("empty confusion matrix".into()));
    }
    let trace: u64 = (0..cm.classes).map(|c| cm.count(c, c)).sum();
    Ok(trace as Real / total as Real)
}

/// Macro-averaged one-vs-rest precision, recall and F1; 0/0 cells are 0.
pub fn prf1(cm: &ConfusionMatrix) -> Result<(Real, Real, Real)> {
    if cm.total() == 0 {
        return Err(Error::Contract("empty confusion matrix".into()));
    }
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            0.0
        } else {
            num as Real / den as Real
        }
    };
    let mut psum = 0.0;
    let mut rsum = 0.0;
    let mut fsum = 0.0;
    for c in 0..cm.classes {
        let tp = cm.count(c, c);
        let pred_c: u64 = (0..cm.classes).map(|t| cm.count(t, c)).sum();
        let true_c: u64 = (0..cm.classes).map(|p| cm.count(c, p)).sum();
        let precision = ratio(tp, pred_c);
        let recall = ratio(tp, true_c);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        psum += precision;
        rsum += recall;
        fsum += f1;
    }
    let k = cm.classes as Real;
    Ok((psum / k, rsum / k, fsum / k))
}

/// Non-interpolated average precision: rank by score descending (ties broken
/// by original index), then sum precision-at-hit times the recall increment.
pub fn average_precision(scores: &[Real], positives: &[bool]) -> Result<Real> {
    if scores.len() != positives.len() {
        return Err(Error::Contract(format!(
            "{} scores vs {} flags",
            scores.len(),
            positives.len()
        )));
    }
    let npos = positives.iter().filter(|&&p| p).count();
    if npos == 0 {
        return Err(Error::Contract("average precision needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps the original-index order among equal scores.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if positives[idx] {
            hits += 1;
            ap += (hits as Real / (rank + 1) as Real) * (1.0 / npos as Real);
        }
    }
    Ok(ap)
}

/// Mean over classes of average precision, scoring class `c` by its softmax
/// probability column. On clean probabilities this is mAP; on probabilities
/// from adversarial inputs it is mARP. Every class must have a true example.
pub fn map_marp(probs: &Tensor, y_true: &[usize]) -> Result<Real> {
    if probs.rank() != 2 || probs.shape()[0] != y_true.len() {
        return Err(Error::Shape(format!(
            "prob shape {:?} vs {} labels",
            probs.shape(),
            y_true.len()
        )));
    }
    let classes = probs.shape()[1];
    let n = y_true.len();
    let mut sum = 0.0;
    for c in 0..classes {
        let positives: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
        if !positives.iter().any(|&p| p) {
            return Err(Error::Contract(format!("class {c} has no true example")));
        }
        let scores: Vec<Real> = (0..n).map(|i| probs.data()[i * classes + c]).collect();
        sum += average_precision(&scores, &positives)?;
    }
    Ok(sum / classes as Real)
}

/// One evaluation row: clean metrics plus robustness metrics under one attack.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub method: String,
    pub attack: String,
    pub gacc: Real,
    pub racc: Real,
    pub map: Real,
    pub marp: Real,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
}

pub const EVAL_CSV_HEADER: &str = "method,attack,gacc,racc,map,marp,precision,recall,f1";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.method,
            self.attack,
            self.gacc,
            self.racc,
            self.map,
            self.marp,
            self.precision,
            self.recall,
            self.f1
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_counting() {
        let cm = confusion(&[0, 1, 2, 1], &[0, 2, 2, 1], 3).unwrap();
        assert_eq!(cm.count(1, 2), 1);
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(1, 1), 1);
        assert_eq!(cm.count(2, 2), 1);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn confusion_rejects_out_of_range() {
        assert!(matches!(
            confusion(&[0, 3], &[0, 0], 3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn accuracy_cases() {
        // binary one-vs-rest reading: TP=3, TN=5, FP=1, FN=1 -> 0.8
        let cm = ConfusionMatrix {
            classes: 2,
            counts: vec![3, 1, 1, 5],
        };
        assert!((accuracy(&cm).unwrap() - 0.8).abs() < 1e-12);

        let perfect = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(accuracy(&perfect).unwrap(), 1.0);

        let wrong = confusion(&[0, 1], &[1, 0], 2).unwrap();
        assert_eq!(accuracy(&wrong).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_invariant_under_relabeling() {
        let y_true = [0, 1, 2, 1, 0, 2, 2];
        let y_pred = [0, 2, 2, 1, 1, 2, 0];
        let base = accuracy(&confusion(&y_true, &y_pred, 3).unwrap()).unwrap();
        let perm = [2, 0, 1];
        let pt: Vec<usize> = y_true.iter().map(|&l| perm[l]).collect();
        let pp: Vec<usize> = y_pred.iter().map(|&l| perm[l]).collect();
        let relabeled = accuracy(&confusion(&pt, &pp, 3).unwrap()).unwrap();
        assert_eq!(base, relabeled);
    }

    #[test]
    fn prf1_cases() {
        let diag = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        let (p, r, f) = prf1(&diag).unwrap();
        assert_eq!((p, r, f), (1.0, 1.0, 1.0));

        // class 1 never predicted: its precision is 0 by the 0/0 rule
        let cm = confusion(&[0, 1], &[0, 0], 2).unwrap();
        let (p, _, _) = prf1(&cm).unwrap();
        assert!((p - 0.25).abs() < 1e-12); // (1/2 + 0)/2

        // binary [[2,1],[1,2]] -> macro P = R = F1 = 2/3
        let cm = ConfusionMatrix {
            classes: 2,
            counts: vec![2, 1, 1, 2],
        };
        let (p, r, f) = prf1(&cm).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn average_precision_examples() {
        // ranked labels [1,0,1,0]: AP = 1/2 * 1 + 1/2 * 2/3
        let scores = [0.9, 0.8, 0.7, 0.6];
        let pos = [true, false, true, false];
        let ap = average_precision(&scores, &pos).unwrap();
        assert!((ap - (0.5 + 0.5 * (2.0 / 3.0))).abs() < 1e-12);

        // all positives ranked first
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap();
        assert_eq!(ap, 1.0);

        // single positive ranked last of n
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap();
        assert!((ap - 0.25).abs() < 1e-12);
    }

    #[test]
    fn average_precision_tie_break_is_stable() {
        let scores = [0.5, 0.5, 0.5];
        let ap1 = average_precision(&scores, &[true, false, false]).unwrap();
        let ap2 = average_precision(&scores, &[false, false, true]).unwrap();
        assert_eq!(ap1, 1.0);
        assert!((ap2 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn average_precision_invariant_under_monotone_score_maps() {
        let mut rng = crate::rng::Rng::new(17);
        for _ in 0..50 {
            let n = 3 + rng.below(6);
            let scores: Vec<Real> = (0..n).map(|_| rng.next_real()).collect();
            let mut pos: Vec<bool> = (0..n).map(|_| rng.next_real() < 0.5).collect();
            if !pos.iter().any(|&p| p) {
                pos[0] = true;
            }
            let base = average_precision(&scores, &pos).unwrap();
            let mapped: Vec<Real> = scores.iter().map(|&s| (3.0 * s + 1.0).exp()).collect();
            let after = average_precision(&mapped, &pos).unwrap();
            assert!((base - after).abs() < 1e-12);
        }
    }

    #[test]
    fn map_of_one_hot_truth_is_one() {
        let probs = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = map_marp(&probs, &[0, 1, 0, 1]).unwrap();
        assert_eq!(m, 1.0);
    }

    #[test]
    fn map_missing_class_is_error() {
        let probs = Tensor::new(vec![2, 2], vec![0.6, 0.4, 0.7, 0.3]).unwrap();
        let err = map_marp(&probs, &[0, 0]).unwrap_err().to_string();
        assert!(err.contains("class 1"), "got: {err}");
    }

    #[test]
    fn map_hand_built_table() {
        // 2 classes, 2 examples each; scores hand-ranked.
        // class 0 column: [0.9, 0.2, 0.6, 0.1], positives at rows 0,2
        //   ranking: 0 (hit, P=1), 2 (hit, P=1), 1, 3 -> AP0 = 1.0
        // class 1 column: [0.1, 0.8, 0.4, 0.3], positives at rows 1,3
        //   ranking: 1 (hit, P=1), 2, 3 (hit, P=2/3), 0 -> AP1 = (1 + 2/3)/2
        let probs = Tensor::new(vec![4, 2], vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.1, 0.3]).unwrap();
        let m = map_marp(&probs, &[0, 1, 0, 1]).unwrap();
        let expect = (1.0 + (1.0 + 2.0 / 3.0) / 2.0) / 2.0;
        assert!((m - expect).abs() < 1e-12);
    }

    #[test]
    fn uniform_scores_ap_approaches_prevalence() {
        // With random scores AP over a large balanced sample approaches the
        // class prevalence.
        let mut rng = crate::rng::Rng::new(23);
        let n = 3000;
        let scores: Vec<Real> = (0..n).map(|_| rng.next_real()).collect();
        let pos: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let ap = average_precision(&scores, &pos).unwrap();
        assert!((ap - 1.0 / 3.0).abs() < 0.05, "ap = {ap}");
    }
}
