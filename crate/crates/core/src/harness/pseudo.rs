//! Pseudo-label selection: rank unlabeled samples by raw max logit (not
//! softmax confidence — the two orderings differ) and label the top slice
//! with their argmax class.

use super::predictions::PredictionSet;
use super::HarnessError;

/// One pseudo-labeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub sample_id: usize,
    pub label: usize,
    pub max_logit: f64,
}

/// `floor(fraction * n)` with a 1e-9 slack so products like 0.29 * 100
/// sitting one ulp below the integer do not lose a sample.
pub fn pseudo_label_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Select the top `floor(fraction * N)` samples by max logit (descending),
/// ties broken toward the lower sample id; each selected sample gets its
/// argmax class as label.
pub fn pseudo_label_select(
    preds: &PredictionSet,
    fraction: f64,
) -> Result<Vec<PseudoLabel>, HarnessError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(HarnessError::InvalidFraction(fraction));
    }
    let k = pseudo_label_count(fraction, preds.len());
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds
            .max_logit(b)
            .partial_cmp(&preds.max_logit(a))
            .expect("finite logits")
            .then(preds.sample_ids[a].cmp(&preds.sample_ids[b]))
    });
    Ok(order[..k]
        .iter()
        .map(|&row| PseudoLabel {
            sample_id: preds.sample_ids[row],
            label: preds.predicted[row],
            max_logit: preds.max_logit(row),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, SeededRng};

    fn set_from(logit_rows: Vec<Vec<f64>>) -> PredictionSet {
        let rows = logit_rows.len();
        let cols = logit_rows[0].len();
        let data: Vec<f64> = logit_rows.into_iter().flatten().collect();
        PredictionSet::from_logits(
            "m",
            (0..rows).collect(),
            Matrix::from_vec(rows, cols, data).unwrap(),
        )
    }

    #[test]
    fn zero_fraction_selects_nothing() {
        let preds = set_from(vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        assert!(pseudo_label_select(&preds, 0.0).unwrap().is_empty());
    }

    #[test]
    fn selects_top_by_max_logit() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0]).collect();
        let preds = set_from(rows);
        let picked = pseudo_label_select(&preds, 0.3).unwrap();
        let ids: Vec<usize> = picked.iter().map(|p| p.sample_id).collect();
        assert_eq!(ids, vec![9, 8, 7]);
    }

    #[test]
    fn ties_break_toward_lower_sample_id() {
        let preds = set_from(vec![vec![2.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0]]);
        let picked = pseudo_label_select(&preds, 2.0 / 3.0).unwrap();
        let ids: Vec<usize> = picked.iter().map(|p| p.sample_id).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn ranking_property_holds() {
        // Minimum selected max-logit >= maximum excluded max-logit.
        let mut rng = SeededRng::new(18);
        for _ in 0..50 {
            let n = 1 + rng.below(30) as usize;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.next_gaussian(), rng.next_gaussian()])
                .collect();
            let preds = set_from(rows);
            let fraction = rng.next_f64();
            let picked = pseudo_label_select(&preds, fraction).unwrap();
            assert_eq!(picked.len(), pseudo_label_count(fraction, n));
            let chosen: std::collections::HashSet<usize> =
                picked.iter().map(|p| p.sample_id).collect();
            let min_in = picked
                .iter()
                .map(|p| p.max_logit)
                .fold(f64::INFINITY, f64::min);
            let max_out = (0..n)
                .filter(|i| !chosen.contains(&preds.sample_ids[*i]))
                .map(|i| preds.max_logit(i))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(picked.is_empty() || min_in >= max_out || max_out == f64::NEG_INFINITY);
        }
    }

    #[test]
    fn rejects_out_of_range_fraction() {
        let preds = set_from(vec![vec![1.0, 0.0]]);
        assert!(pseudo_label_select(&preds, 1.5).is_err());
        assert!(pseudo_label_select(&preds, -0.1).is_err());
    }
}
