//! Test-time augmentation: average softmax probabilities over a
//! deterministic view set (identity plus seeded augmented views).

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::datagen::{augment, recenter, AugmentPolicy};
use crate::model::ModelParams;
use crate::numerics::{softmax_rows, Matrix, SeededRng};
use crate::trainer::predict_logits;

/// TTA settings. `num_views = 1` (or an identity augment policy) is plain
/// prediction; five views is the default multi-view setting.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TtaPolicy {
    pub num_views: usize,
    pub augment: AugmentPolicy,
    /// Apply the deterministic recenter transform to every view first (the
    /// detector-recrop stand-in).
    pub recenter: bool,
}

impl TtaPolicy {
    pub fn disabled() -> Self {
        TtaPolicy {
            num_views: 1,
            augment: AugmentPolicy::identity(),
            recenter: false,
        }
    }

    pub fn five_view(augment: AugmentPolicy) -> Self {
        TtaPolicy {
            num_views: 5,
            augment,
            recenter: false,
        }
    }

    pub fn is_plain(&self) -> bool {
        (self.num_views <= 1 || self.augment.is_identity()) && !self.recenter
    }
}

impl Default for TtaPolicy {
    fn default() -> Self {
        TtaPolicy::disabled()
    }
}

/// Averaged class probabilities for one sample.
///
/// The view set is the (optionally recentered) sample plus `num_views - 1`
/// augmentations drawn from the `(seed, "tta", sample_id)` stream, so the
/// result does not depend on evaluation order. When every view would be
/// identical the plain softmax is returned directly, which keeps the
/// identity policy bit-equal to plain prediction.
pub fn tta_predict(
    params: &ModelParams,
    sample: &[f64],
    meta_row: &[f64],
    policy: &TtaPolicy,
    root_rng: &SeededRng,
    sample_id: usize,
) -> Result<Vec<f64>, HarnessError> {
    if policy.num_views < 1 {
        return Err(HarnessError::Mismatch("num_views must be >= 1".into()));
    }
    let base: Vec<f64> = if policy.recenter {
        recenter(sample)
    } else {
        sample.to_vec()
    };
    let single = |x: &[f64]| -> Result<Vec<f64>, HarnessError> {
        let f = Matrix::from_vec(1, x.len(), x.to_vec())
            .map_err(|e| HarnessError::Mismatch(e.to_string()))?;
        let m = Matrix::from_vec(1, meta_row.len(), meta_row.to_vec())
            .map_err(|e| HarnessError::Mismatch(e.to_string()))?;
        let logits = predict_logits(params, &f, &m)
            .map_err(|e| HarnessError::Stage {
                stage: "tta",
                message: e.to_string(),
            })?;
        let probs = softmax_rows(&logits).map_err(|e| HarnessError::Mismatch(e.to_string()))?;
        Ok(probs.row(0).to_vec())
    };

    if policy.num_views == 1 || policy.augment.is_identity() {
        return single(&base);
    }

    let mut rng = root_rng.child_indexed("tta", sample_id as u64);
    let mut mean = single(&base)?;
    for _ in 1..policy.num_views {
        let view = augment(&base, &policy.augment, &mut rng);
        let probs = single(&view)?;
        for (m, p) in mean.iter_mut().zip(&probs) {
            *m += p;
        }
    }
    for m in &mut mean {
        *m /= policy.num_views as f64;
    }
    Ok(mean)
}
