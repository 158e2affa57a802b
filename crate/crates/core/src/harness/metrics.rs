//! Macro-F1 evaluation with a head/tail breakdown.

use super::HarnessError;

/// Per-class F1 plus the unweighted macro mean over classes present in the
/// ground truth. Classes absent from the truth carry `None` and do not
/// enter the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub per_class: Vec<Option<f64>>,
    pub macro_f1: f64,
}

/// Compute per-class F1 = 2PR / (P + R) with F1 = 0 when P + R = 0, and
/// the unweighted macro mean over classes present in the truth.
pub fn macro_f1(
    predictions: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<F1Report, HarnessError> {
    if truth.is_empty() {
        return Err(HarnessError::EmptyEvaluation);
    }
    if predictions.len() != truth.len() {
        return Err(HarnessError::Mismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if let Some(&bad) = predictions.iter().chain(truth).find(|&&l| l >= num_classes) {
        return Err(HarnessError::Mismatch(format!(
            "label {bad} outside class space of {num_classes}"
        )));
    }

    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut present = vec![false; num_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        present[t] = true;
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }

    let mut per_class = vec![None; num_classes];
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..num_classes {
        if !present[c] {
            continue;
        }
        let pred_total = tp[c] + fp[c];
        let truth_total = tp[c] + fn_[c];
        let precision = if pred_total == 0 {
            0.0
        } else {
            tp[c] as f64 / pred_total as f64
        };
        let recall = tp[c] as f64 / truth_total as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class[c] = Some(f1);
        sum += f1;
        count += 1;
    }
    Ok(F1Report {
        per_class,
        macro_f1: sum / count as f64,
    })
}

/// Unweighted mean F1 over head classes (train count at or above the
/// median) and tail classes (below). Groups with no class present in the
/// truth report `None`.
pub fn head_tail_f1(report: &F1Report, train_counts: &[usize]) -> (Option<f64>, Option<f64>) {
    assert_eq!(report.per_class.len(), train_counts.len());
    let mut sorted: Vec<usize> = train_counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let mut head = (0.0, 0usize);
    let mut tail = (0.0, 0usize);
    for (c, f1) in report.per_class.iter().enumerate() {
        let Some(f1) = f1 else { continue };
        if (train_counts[c] as f64) >= median {
            head.0 += f1;
            head.1 += 1;
        } else {
            tail.0 += f1;
            tail.1 += 1;
        }
    }
    let avg = |(s, k): (f64, usize)| if k == 0 { None } else { Some(s / k as f64) };
    (avg(head), avg(tail))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use crate::tolerances::FROZEN;

    #[test]
    fn perfect_predictions_score_one() {
        let r = macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn hand_computed_confusion() {
        // truth [0,0,1,1], preds [0,1,1,1]: class0 F1 = 2/3, class1 = 0.8.
        let r = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((r.per_class[0].unwrap() - 2.0 / 3.0).abs() <= FROZEN);
        assert!((r.per_class[1].unwrap() - 0.8).abs() <= FROZEN);
        assert!((r.macro_f1 - 0.733_333_333_333_333_4).abs() <= FROZEN);
    }

    #[test]
    fn collapsed_predictor_on_balanced_truth() {
        let r = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((r.macro_f1 - 1.0 / 3.0).abs() <= FROZEN);
    }

    #[test]
    fn absent_classes_do_not_enter_the_mean() {
        let r = macro_f1(&[0, 2], &[0, 0], 3).unwrap();
        assert_eq!(r.per_class[1], None);
        assert_eq!(r.per_class[2], None);
        // class0: tp=1, fn=1 -> P=1, R=0.5 -> 2/3; macro over {0} only.
        assert!((r.macro_f1 - 2.0 / 3.0).abs() <= FROZEN);
    }

    #[test]
    fn rejects_empty_and_out_of_range() {
        assert!(matches!(
            macro_f1(&[], &[], 2),
            Err(HarnessError::EmptyEvaluation)
        ));
        assert!(macro_f1(&[2], &[0], 2).is_err());
    }

    #[test]
    fn matches_brute_force_oracle_exhaustively() {
        // All label/prediction combinations with C <= 3, N <= 4 (the full
        // C = 4, N = 8 sweep lives in the acceptance suite).
        for c in 2..=3usize {
            for n in 1..=4usize {
                let total = c.pow(n as u32);
                for t_code in 0..total {
                    for p_code in 0..total {
                        let decode = |mut code: usize| {
                            (0..n)
                                .map(|_| {
                                    let v = code % c;
                                    code /= c;
                                    v
                                })
                                .collect::<Vec<_>>()
                        };
                        let truth = decode(t_code);
                        let preds = decode(p_code);
                        let fast = macro_f1(&preds, &truth, c).unwrap();
                        let slow = brute_force_macro_f1(&preds, &truth, c);
                        assert!(
                            (fast.macro_f1 - slow).abs() <= 1e-12,
                            "C={c} truth={truth:?} preds={preds:?}"
                        );
                    }
                }
            }
        }
    }

    /// Independent oracle: build the full confusion matrix, then apply the
    /// definition directly.
    fn brute_force_macro_f1(preds: &[usize], truth: &[usize], c: usize) -> f64 {
        let mut confusion = vec![vec![0usize; c]; c];
        for (&p, &t) in preds.iter().zip(truth) {
            confusion[t][p] += 1;
        }
        let mut sum = 0.0;
        let mut count = 0;
        for class in 0..c {
            let truth_total: usize = confusion[class].iter().sum();
            if truth_total == 0 {
                continue;
            }
            let tp = confusion[class][class];
            let pred_total: usize = (0..c).map(|t| confusion[t][class]).sum();
            let precision = if pred_total == 0 {
                0.0
            } else {
                tp as f64 / pred_total as f64
            };
            let recall = tp as f64 / truth_total as f64;
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            sum += f1;
            count += 1;
        }
        sum / count as f64
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = SeededRng::new(9);
        let n = 20;
        let truth: Vec<usize> = (0..n).map(|_| rng.below(4) as usize).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.below(4) as usize).collect();
        let base = macro_f1(&preds, &truth, 4).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let pt: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
        let pp: Vec<usize> = order.iter().map(|&i| preds[i]).collect();
        let permuted = macro_f1(&pp, &pt, 4).unwrap();
        assert_eq!(base.macro_f1, permuted.macro_f1);
    }

    #[test]
    fn head_tail_split_at_median() {
        let report = F1Report {
            per_class: vec![Some(1.0), Some(0.8), Some(0.5), Some(0.2)],
            macro_f1: 0.625,
        };
        let counts = [100, 40, 10, 2];
        // median = 25: head = {100, 40}, tail = {10, 2}.
        let (head, tail) = head_tail_f1(&report, &counts);
        assert!((head.unwrap() - 0.9).abs() <= 1e-12);
        assert!((tail.unwrap() - 0.35).abs() <= 1e-12);
    }
}
