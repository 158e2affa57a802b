//! Model fusion. The default rule follows the highest single logit across
//! models; mean-probability fusion is available as a flagged alternative.
//! Logit comparability across models is the caller's responsibility (the
//! rule compares raw values).

use serde::{Deserialize, Serialize};

use super::predictions::PredictionSet;
use super::HarnessError;
use crate::numerics::{softmax_rows, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    #[default]
    MaxLogit,
    MeanProb,
}

fn validate_sets(sets: &[PredictionSet]) -> Result<(), HarnessError> {
    if sets.is_empty() {
        return Err(HarnessError::EmptyEnsemble);
    }
    let first = &sets[0];
    for s in &sets[1..] {
        if s.sample_ids != first.sample_ids {
            return Err(HarnessError::Mismatch(format!(
                "prediction sets '{}' and '{}' cover different samples",
                first.model_id, s.model_id
            )));
        }
        if s.num_classes() != first.num_classes() {
            return Err(HarnessError::Mismatch(format!(
                "prediction sets '{}' and '{}' have different class spaces",
                first.model_id, s.model_id
            )));
        }
    }
    Ok(())
}

/// Per sample, pick the (model, class) pair with the globally highest
/// logit; ties go to the earlier model in the list, then the lower class
/// index. The fused set carries the winning model's logit row per sample.
pub fn ensemble_max_logit(sets: &[PredictionSet]) -> Result<PredictionSet, HarnessError> {
    validate_sets(sets)?;
    let n = sets[0].len();
    let c = sets[0].num_classes();
    let mut logits = Matrix::zeros(n, c);
    for i in 0..n {
        let mut best_model = 0usize;
        let mut best_value = sets[0].max_logit(i);
        for (m, s) in sets.iter().enumerate().skip(1) {
            let value = s.max_logit(i);
            if value > best_value {
                best_value = value;
                best_model = m;
            }
        }
        logits.row_mut(i).copy_from_slice(sets[best_model].logits.row(i));
    }
    Ok(PredictionSet::from_logits(
        "ensemble:max_logit",
        sets[0].sample_ids.clone(),
        logits,
    ))
}

/// Mean of per-model softmax probabilities; the fused "logits" are the
/// averaged probabilities (argmax is unchanged by the monotone map).
pub fn ensemble_mean_prob(sets: &[PredictionSet]) -> Result<PredictionSet, HarnessError> {
    validate_sets(sets)?;
    let n = sets[0].len();
    let c = sets[0].num_classes();
    let mut mean = Matrix::zeros(n, c);
    for s in sets {
        let probs =
            softmax_rows(&s.logits).map_err(|e| HarnessError::Mismatch(e.to_string()))?;
        mean.add_scaled(&probs, 1.0 / sets.len() as f64);
    }
    Ok(PredictionSet::from_logits(
        "ensemble:mean_prob",
        sets[0].sample_ids.clone(),
        mean,
    ))
}

pub fn ensemble(sets: &[PredictionSet], rule: FusionRule) -> Result<PredictionSet, HarnessError> {
    match rule {
        FusionRule::MaxLogit => ensemble_max_logit(sets),
        FusionRule::MeanProb => ensemble_mean_prob(sets),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(model: &str, rows: Vec<Vec<f64>>) -> PredictionSet {
        let n = rows.len();
        let c = rows[0].len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        PredictionSet::from_logits(model, (0..n).collect(), Matrix::from_vec(n, c, data).unwrap())
    }

    #[test]
    fn picks_globally_highest_logit() {
        // Model A peaks at 5.0 on class 2; model B at 3.0 on class 7.
        let a = set("a", vec![vec![0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        let b = set("b", vec![vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0]]);
        let fused = ensemble_max_logit(&[a, b]).unwrap();
        assert_eq!(fused.predicted, vec![2]);
    }

    #[test]
    fn identical_sets_fuse_to_themselves() {
        let a = set("a", vec![vec![1.0, 2.0], vec![3.0, 0.5]]);
        let fused = ensemble_max_logit(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(fused.predicted, a.predicted);
        assert_eq!(fused.logits, a.logits);
    }

    #[test]
    fn singleton_input_equals_its_argmax() {
        let a = set("a", vec![vec![0.2, 0.9, 0.1], vec![5.0, -1.0, 2.0]]);
        let fused = ensemble_max_logit(std::slice::from_ref(&a)).unwrap();
        assert_eq!(fused.predicted, a.predicted);
    }

    #[test]
    fn ties_prefer_earlier_model() {
        let a = set("a", vec![vec![2.0, 0.0]]);
        let b = set("b", vec![vec![0.0, 2.0]]);
        let fused = ensemble_max_logit(&[a, b]).unwrap();
        // Equal max logits: model a wins, class 0.
        assert_eq!(fused.predicted, vec![0]);
    }

    #[test]
    fn rejects_mismatched_sets() {
        let a = set("a", vec![vec![1.0, 0.0]]);
        let mut b = set("b", vec![vec![1.0, 0.0]]);
        b.sample_ids = vec![5];
        assert!(ensemble_max_logit(&[a.clone(), b]).is_err());
        let c = set("c", vec![vec![1.0, 0.0, 0.0]]);
        assert!(ensemble_max_logit(&[a, c]).is_err());
        assert!(matches!(
            ensemble_max_logit(&[]),
            Err(HarnessError::EmptyEnsemble)
        ));
    }

    #[test]
    fn mean_prob_is_the_flagged_alternative() {
        let a = set("a", vec![vec![10.0, 0.0]]);
        let b = set("b", vec![vec![0.0, 1.0]]);
        let fused = ensemble_mean_prob(&[a, b]).unwrap();
        // Probabilities (≈1, 0) and (0.27, 0.73) average to class 0.
        assert_eq!(fused.predicted, vec![0]);
    }
}
