//! Supervised losses with forward values and analytic gradients.
//!
//! All losses use mean reduction over the batch so magnitudes are
//! comparable across batch sizes. Regularization terms are not part of the
//! reported values: the optimizer applies decoupled weight decay instead,
//! so loss curves stay comparable across loss choices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{l2_normalize_rows, log_sum_exp, log_sum_exp_allow_neg_inf, softmax_rows, Matrix};

/// Tolerance when checking that soft targets sum to one.
const TARGET_SUM_TOL: f64 = 1e-8;

/// Row norms below this are treated as degenerate in angular losses.
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("target row {row} is not a probability distribution (sum {sum})")]
    NotADistribution { row: usize, sum: f64 },
    #[error("label smoothing epsilon {0} must be in [0, 1)")]
    InvalidEpsilon(f64),
    #[error("degenerate (near-zero norm) {what} at index {index}")]
    DegenerateRow { what: &'static str, index: usize },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

/// Scalar loss plus the gradient with respect to the logits.
///
/// `per_sample` carries the unreduced losses so hard-example mining can
/// re-weight without recomputing the forward pass.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grad_logits: Matrix,
}

/// Arcface result: gradients flow to the unnormalized embeddings and to
/// the class-weight matrix (chain rule through both normalizations).
#[derive(Debug, Clone)]
pub struct ArcfaceLossResult {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grad_embeddings: Matrix,
    /// Same orientation as the input weights: embed_dim x num_classes.
    pub grad_weights: Matrix,
}

/// Mean soft-target cross entropy:
/// `mean_i [ -sum_j t_ij log softmax(z_i)_j ]`, gradient
/// `(softmax(z) - t) / batch`.
pub fn soft_target_ce(logits: &Matrix, soft_targets: &Matrix) -> Result<LossResult, LossError> {
    if logits.rows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if logits.rows() != soft_targets.rows() || logits.cols() != soft_targets.cols() {
        return Err(LossError::ShapeMismatch(format!(
            "logits {}x{} vs targets {}x{}",
            logits.rows(),
            logits.cols(),
            soft_targets.rows(),
            soft_targets.cols()
        )));
    }
    for r in 0..soft_targets.rows() {
        let row = soft_targets.row(r);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > TARGET_SUM_TOL {
            return Err(LossError::NotADistribution { row: r, sum });
        }
    }

    let n = logits.rows();
    let probs = softmax_rows(logits)?;
    let mut per_sample = Vec::with_capacity(n);
    let mut grad = Matrix::zeros(n, logits.cols());
    for i in 0..n {
        let z = logits.row(i);
        let t = soft_targets.row(i);
        let lse = log_sum_exp(z)?;
        let dot: f64 = t.iter().zip(z).map(|(ti, zi)| ti * zi).sum();
        per_sample.push(lse - dot);
        for j in 0..logits.cols() {
            grad.set(i, j, (probs.get(i, j) - t[j]) / n as f64);
        }
    }
    let loss = per_sample.iter().sum::<f64>() / n as f64;
    Ok(LossResult {
        loss,
        per_sample,
        grad_logits: grad,
    })
}

/// Label-smoothing cross entropy: delegates to [`soft_target_ce`] with
/// targets `(1 - epsilon) * onehot + epsilon / C`. `epsilon = 0` is plain
/// cross entropy, bit for bit.
pub fn label_smoothing_ce(
    logits: &Matrix,
    labels: &[usize],
    epsilon: f64,
) -> Result<LossResult, LossError> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(LossError::InvalidEpsilon(epsilon));
    }
    if logits.rows() != labels.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let c = logits.cols();
    let mut targets = Matrix::zeros(logits.rows(), c);
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..c {
            let base = if j == y { 1.0 } else { 0.0 };
            targets.set(i, j, (1.0 - epsilon) * base + epsilon / c as f64);
        }
    }
    soft_target_ce(logits, &targets)
}

/// Plain cross entropy on integer labels.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossResult, LossError> {
    label_smoothing_ce(logits, labels, 0.0)
}

/// Additive angular margin configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArcfaceConfig {
    /// Hypersphere radius applied to all cosine logits.
    pub scale_s: f64,
    /// Additive angular margin on the target class, in radians.
    pub margin_m: f64,
    /// Realized as decoupled weight decay in the optimizer, never added to
    /// the reported loss value.
    pub weight_decay_l2: f64,
    /// Cosines are clamped to `[-1 + eps, 1 - eps]` before the margin
    /// trigonometry; gradients do not flow through an active clamp.
    pub cos_clamp_eps: f64,
}

impl Default for ArcfaceConfig {
    fn default() -> Self {
        ArcfaceConfig {
            scale_s: 16.0,
            margin_m: 0.2,
            weight_decay_l2: 0.0,
            cos_clamp_eps: 1e-6,
        }
    }
}

impl ArcfaceConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.scale_s > 0.0 && self.scale_s.is_finite()) {
            return Err(LossError::InvalidConfig("scale_s must be positive".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin_m) {
            return Err(LossError::InvalidConfig(
                "margin_m must be in [0, pi/2)".into(),
            ));
        }
        if self.weight_decay_l2 < 0.0 {
            return Err(LossError::InvalidConfig(
                "weight_decay_l2 must be non-negative".into(),
            ));
        }
        if !(self.cos_clamp_eps > 0.0 && self.cos_clamp_eps <= 1e-3) {
            return Err(LossError::InvalidConfig(
                "cos_clamp_eps must be in (0, 1e-3]".into(),
            ));
        }
        Ok(())
    }
}

/// Additive angular margin loss over normalized embeddings and class
/// weights.
///
/// The target-class logit is `s * cos(theta_y + m)` expanded as
/// `s * (cos theta * cos m - sin theta * sin m)`; every other logit is
/// `s * cos theta_j`. With `m = 0` this is exactly cross entropy over
/// `s`-scaled cosine logits.
///
/// `class_weights` is embed_dim x num_classes (column `j` is class `j`).
pub fn arcface(
    embeddings: &Matrix,
    class_weights: &Matrix,
    labels: &[usize],
    cfg: &ArcfaceConfig,
) -> Result<ArcfaceLossResult, LossError> {
    cfg.validate()?;
    let n = embeddings.rows();
    let d = embeddings.cols();
    let c = class_weights.cols();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    if class_weights.rows() != d {
        return Err(LossError::ShapeMismatch(format!(
            "embeddings dim {d} vs weight rows {}",
            class_weights.rows()
        )));
    }
    if labels.len() != n {
        return Err(LossError::ShapeMismatch(format!(
            "{n} embedding rows vs {} labels",
            labels.len()
        )));
    }

    let normed_x = l2_normalize_rows(embeddings, DEGENERATE_NORM);
    if let Some(i) = normed_x.degenerate.iter().position(|d| *d) {
        return Err(LossError::DegenerateRow {
            what: "embedding row",
            index: i,
        });
    }
    let weights_t = class_weights.transpose(); // c x d, row j = class j
    let normed_w = l2_normalize_rows(&weights_t, DEGENERATE_NORM);
    if let Some(j) = normed_w.degenerate.iter().position(|d| *d) {
        return Err(LossError::DegenerateRow {
            what: "class weight column",
            index: j,
        });
    }

    let x_norms: Vec<f64> = (0..n)
        .map(|i| embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let w_norms: Vec<f64> = (0..c)
        .map(|j| weights_t.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();

    let cos_m = cfg.margin_m.cos();
    let sin_m = cfg.margin_m.sin();
    let clamp_hi = 1.0 - cfg.cos_clamp_eps;
    let clamp_lo = -1.0 + cfg.cos_clamp_eps;

    // Raw cosine table (n x c) and the clamped copy used for logits.
    let cos_raw = normed_x.matrix.matmul_transpose(&normed_w.matrix);
    let mut logits = Matrix::zeros(n, c);
    let mut clamped = vec![false; n * c];
    let mut cos_used = Matrix::zeros(n, c);
    for i in 0..n {
        for j in 0..c {
            let raw = cos_raw.get(i, j);
            let cl = raw.clamp(clamp_lo, clamp_hi);
            clamped[i * c + j] = raw != cl;
            cos_used.set(i, j, cl);
            if j == labels[i] {
                let sin = (1.0 - cl * cl).sqrt();
                logits.set(i, j, cfg.scale_s * (cl * cos_m - sin * sin_m));
            } else {
                logits.set(i, j, cfg.scale_s * cl);
            }
        }
    }

    let probs = softmax_rows(&logits)?;
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n {
        per_sample.push(log_sum_exp(logits.row(i))? - logits.get(i, labels[i]));
    }
    let loss = per_sample.iter().sum::<f64>() / n as f64;

    let mut grad_x = Matrix::zeros(n, d);
    let mut grad_w_t = Matrix::zeros(c, d);
    for i in 0..n {
        let y = labels[i];
        for j in 0..c {
            if clamped[i * c + j] {
                continue; // flat region of the clamp
            }
            let g_logit = (probs.get(i, j) - if j == y { 1.0 } else { 0.0 }) / n as f64;
            let cl = cos_used.get(i, j);
            let dlogit_dcos = if j == y {
                let sin = (1.0 - cl * cl).sqrt();
                cfg.scale_s * (cos_m + sin_m * cl / sin)
            } else {
                cfg.scale_s
            };
            let coeff = g_logit * dlogit_dcos;
            // d cos / d x_i = (w_hat_j - cos * x_hat_i) / |x_i|
            // d cos / d w_j = (x_hat_i - cos * w_hat_j) / |w_j|
            for k in 0..d {
                let xh = normed_x.matrix.get(i, k);
                let wh = normed_w.matrix.get(j, k);
                grad_x.set(
                    i,
                    k,
                    grad_x.get(i, k) + coeff * (wh - cl * xh) / x_norms[i],
                );
                grad_w_t.set(
                    j,
                    k,
                    grad_w_t.get(j, k) + coeff * (xh - cl * wh) / w_norms[j],
                );
            }
        }
    }

    Ok(ArcfaceLossResult {
        loss,
        per_sample,
        grad_embeddings: grad_x,
        grad_weights: grad_w_t.transpose(),
    })
}

/// Seesaw configuration; the defaults follow the reported settings
/// p = 0.8, q = 2, gamma = 0.95.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeesawConfig {
    /// Mitigation exponent on the class-count ratio.
    pub p: f64,
    /// Compensation exponent on the probability ratio.
    pub q: f64,
    /// Temperature coefficient multiplying every off-diagonal factor.
    pub gamma: f64,
    /// Realized as decoupled weight decay in the optimizer.
    pub weight_decay_l2: f64,
}

impl Default for SeesawConfig {
    fn default() -> Self {
        SeesawConfig {
            p: 0.8,
            q: 2.0,
            gamma: 0.95,
            weight_decay_l2: 0.0,
        }
    }
}

impl SeesawConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.p < 0.0 || self.q < 0.0 {
            return Err(LossError::InvalidConfig(
                "p and q must be non-negative".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(LossError::InvalidConfig("gamma must be in (0, 1]".into()));
        }
        if self.weight_decay_l2 < 0.0 {
            return Err(LossError::InvalidConfig(
                "weight_decay_l2 must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Cumulative per-class instance counts, updated before the factors are
/// computed on every call. Owned by exactly one training loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeesawState {
    counts: Vec<u64>,
}

impl SeesawState {
    pub fn new(num_classes: usize) -> Self {
        SeesawState {
            counts: vec![0; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        SeesawState { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn observe(&mut self, labels: &[usize]) {
        for &y in labels {
            self.counts[y] += 1;
        }
    }
}

/// Mitigation factor `M_ij`: 1 when the positive class is no more frequent
/// than the negative, otherwise `(D_j / D_i)^p`.
pub fn mitigation_factor(d_pos: u64, d_neg: u64, p: f64) -> f64 {
    if d_pos <= d_neg {
        1.0
    } else {
        (d_neg as f64 / d_pos as f64).powf(p)
    }
}

/// Compensation factor `C_ij`: 1 unless the negative class out-scores the
/// positive, otherwise `(sigma_j / sigma_i)^q`.
pub fn compensation_factor(sigma_pos: f64, sigma_neg: f64, q: f64) -> f64 {
    if sigma_neg <= sigma_pos {
        1.0
    } else {
        (sigma_neg / sigma_pos).powf(q)
    }
}

/// Seesaw loss with online count state.
///
/// The batch's labels are added to `state` first; every negative logit is
/// then rescaled by `S = gamma * M * C`, where the factors are computed
/// from the updated counts and the plain softmax of the current logits.
/// The factors are constants with respect to the gradient (their purpose
/// is to rescale negative-class pressure, not to be optimized through).
///
/// Internally the rescaled denominator is assembled in log space, so a
/// factor of zero (a never-seen negative class) or an extreme probability
/// ratio cannot overflow: the per-sample loss is
/// `logsumexp_j(ln S_ij + z_j) - z_y` with `ln S_iy = 0`.
pub fn seesaw(
    logits: &Matrix,
    labels: &[usize],
    state: &mut SeesawState,
    cfg: &SeesawConfig,
) -> Result<LossResult, LossError> {
    cfg.validate()?;
    let n = logits.rows();
    let c = logits.cols();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    if labels.len() != n {
        return Err(LossError::ShapeMismatch(format!(
            "{n} logit rows vs {} labels",
            labels.len()
        )));
    }
    if state.counts.len() != c {
        return Err(LossError::ShapeMismatch(format!(
            "state has {} classes, logits have {c}",
            state.counts.len()
        )));
    }
    logits.check_finite("seesaw logits")?;

    state.observe(labels);

    let ln_gamma = cfg.gamma.ln();
    let mut per_sample = Vec::with_capacity(n);
    let mut grad = Matrix::zeros(n, c);
    let mut terms = vec![0.0f64; c];
    for i in 0..n {
        let y = labels[i];
        let z = logits.row(i);
        let d_pos = state.counts[y];
        for j in 0..c {
            if j == y {
                terms[j] = z[j];
                continue;
            }
            // ln M: count-ratio branch, -inf when the negative class has
            // never been seen (its rescaled term vanishes).
            let ln_m = if d_pos <= state.counts[j] {
                0.0
            } else if state.counts[j] == 0 {
                f64::NEG_INFINITY
            } else {
                cfg.p * ((state.counts[j] as f64).ln() - (d_pos as f64).ln())
            };
            // ln C: probability-ratio branch; softmax ratios reduce to
            // logit differences exactly.
            let ln_c = if z[j] <= z[y] { 0.0 } else { cfg.q * (z[j] - z[y]) };
            terms[j] = ln_gamma + ln_m + ln_c + z[j];
        }
        let lse = log_sum_exp_allow_neg_inf(&terms);
        per_sample.push(lse - z[y]);
        for j in 0..c {
            let w = if terms[j] == f64::NEG_INFINITY {
                0.0
            } else {
                (terms[j] - lse).exp()
            };
            grad.set(i, j, (w - if j == y { 1.0 } else { 0.0 }) / n as f64);
        }
    }
    let loss = per_sample.iter().sum::<f64>() / n as f64;
    Ok(LossResult {
        loss,
        per_sample,
        grad_logits: grad,
    })
}

/// The supervised loss a run trains against.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossChoice {
    SoftTargetCe,
    LabelSmoothing { epsilon: f64 },
    Arcface(ArcfaceConfig),
    Seesaw(SeesawConfig),
    /// Cross entropy with hard-example mining over the per-sample losses.
    OhemCe { keep_fraction: f64 },
}

impl LossChoice {
    /// Weight decay the optimizer should apply for this loss (the angular
    /// and seesaw losses carry their regularizer as decoupled decay).
    pub fn weight_decay(&self) -> f64 {
        match self {
            LossChoice::Arcface(cfg) => cfg.weight_decay_l2,
            LossChoice::Seesaw(cfg) => cfg.weight_decay_l2,
            _ => 0.0,
        }
    }

    pub fn is_arcface(&self) -> bool {
        matches!(self, LossChoice::Arcface(_))
    }

    pub fn needs_seesaw_state(&self) -> bool {
        matches!(self, LossChoice::Seesaw(_))
    }

    pub fn validate(&self) -> Result<(), LossError> {
        match self {
            LossChoice::SoftTargetCe => Ok(()),
            LossChoice::LabelSmoothing { epsilon } => {
                if (0.0..1.0).contains(epsilon) {
                    Ok(())
                } else {
                    Err(LossError::InvalidEpsilon(*epsilon))
                }
            }
            LossChoice::Arcface(cfg) => cfg.validate(),
            LossChoice::Seesaw(cfg) => cfg.validate(),
            LossChoice::OhemCe { keep_fraction } => {
                if *keep_fraction > 0.0 && *keep_fraction <= 1.0 {
                    Ok(())
                } else {
                    Err(LossError::InvalidConfig(
                        "keep_fraction must be in (0, 1]".into(),
                    ))
                }
            }
        }
    }

    /// Short name used in manifests and report tables.
    pub fn name(&self) -> &'static str {
        match self {
            LossChoice::SoftTargetCe => "soft_target_ce",
            LossChoice::LabelSmoothing { .. } => "label_smoothing_ce",
            LossChoice::Arcface(_) => "arcface",
            LossChoice::Seesaw(_) => "seesaw",
            LossChoice::OhemCe { .. } => "ohem_ce",
        }
    }
}

/// Indices kept by hard-example mining, ascending, plus their mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct OhemSelection {
    pub indices: Vec<usize>,
    pub mean: f64,
}

/// Keep the `ceil(keep_fraction * N)` largest per-sample losses, ties
/// broken toward the lower index. The gradient mask implied by the
/// selection zeroes dropped samples and rescales kept ones by `N / k`.
pub fn ohem_filter(per_sample: &[f64], keep_fraction: f64) -> Result<OhemSelection, LossError> {
    if per_sample.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(LossError::InvalidConfig(
            "keep_fraction must be in (0, 1]".into(),
        ));
    }
    let n = per_sample.len();
    let k = ((keep_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        per_sample[b]
            .partial_cmp(&per_sample[a])
            .expect("finite losses")
            .then(a.cmp(&b))
    });
    let mut indices: Vec<usize> = order[..k].to_vec();
    indices.sort_unstable();
    let mean = indices.iter().map(|&i| per_sample[i]).sum::<f64>() / k as f64;
    Ok(OhemSelection { indices, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use crate::tolerances::{ANALYTIC, FD_STEP, FROZEN, GRAD_NORM_FLOOR, GRAD_REL};

    fn onehot(labels: &[usize], c: usize) -> Matrix {
        let mut t = Matrix::zeros(labels.len(), c);
        for (i, &y) in labels.iter().enumerate() {
            t.set(i, y, 1.0);
        }
        t
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(GRAD_NORM_FLOOR)
    }

    #[test]
    fn soft_target_ce_uniform_logits() {
        let logits = Matrix::zeros(1, 2);
        let targets = onehot(&[0], 2);
        let r = soft_target_ce(&logits, &targets).unwrap();
        assert!((r.loss - 2.0_f64.ln()).abs() <= ANALYTIC);
    }

    #[test]
    fn soft_target_ce_stationary_at_matching_targets() {
        let logits = Matrix::from_vec(2, 3, vec![1.0, -0.5, 0.25, 0.0, 2.0, -1.0]).unwrap();
        let targets = softmax_rows(&logits).unwrap();
        let r = soft_target_ce(&logits, &targets).unwrap();
        for g in r.grad_logits.data() {
            assert!(g.abs() <= ANALYTIC);
        }
    }

    #[test]
    fn soft_target_ce_frozen_value() {
        // ln(e + 2) - 0.5, frozen from the reference oracle.
        let logits = Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let targets = Matrix::from_vec(1, 3, vec![0.5, 0.5, 0.0]).unwrap();
        let r = soft_target_ce(&logits, &targets).unwrap();
        assert!((r.loss - 1.051_444_713_932_051).abs() <= FROZEN);
    }

    #[test]
    fn soft_target_ce_rejects_non_distribution() {
        let logits = Matrix::zeros(1, 2);
        let bad = Matrix::from_vec(1, 2, vec![0.7, 0.7]).unwrap();
        assert!(matches!(
            soft_target_ce(&logits, &bad),
            Err(LossError::NotADistribution { .. })
        ));
    }

    #[test]
    fn label_smoothing_zero_is_plain_ce_bit_level() {
        let logits = Matrix::from_vec(2, 3, vec![1.0, -2.0, 0.5, 0.0, 0.25, -1.0]).unwrap();
        let labels = [2usize, 1];
        let a = label_smoothing_ce(&logits, &labels, 0.0).unwrap();
        let b = soft_target_ce(&logits, &onehot(&labels, 3)).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        for (x, y) in a.grad_logits.data().iter().zip(b.grad_logits.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn label_smoothing_uniform_logits_symmetry() {
        // Uniform logits make the loss target-independent: ln 2.
        let logits = Matrix::zeros(1, 2);
        let r = label_smoothing_ce(&logits, &[0], 0.1).unwrap();
        assert!((r.loss - 2.0_f64.ln()).abs() <= ANALYTIC);
    }

    #[test]
    fn label_smoothing_frozen_value() {
        let logits = Matrix::from_vec(1, 3, vec![2.0, 0.0, 0.0]).unwrap();
        let r = label_smoothing_ce(&logits, &[0], 0.1).unwrap();
        assert!((r.loss - 0.372_878_099_555_217_9).abs() <= FROZEN);
    }

    #[test]
    fn label_smoothing_rejects_bad_epsilon() {
        let logits = Matrix::zeros(1, 2);
        assert!(label_smoothing_ce(&logits, &[0], 1.0).is_err());
        assert!(label_smoothing_ce(&logits, &[0], -0.1).is_err());
    }

    #[test]
    fn arcface_zero_margin_reduces_to_cosine_ce() {
        let mut rng = SeededRng::new(5);
        let emb =
            Matrix::from_vec(3, 4, (0..12).map(|_| rng.next_gaussian()).collect()).unwrap();
        let w = Matrix::from_vec(4, 3, (0..12).map(|_| rng.next_gaussian()).collect()).unwrap();
        let labels = [0usize, 2, 1];
        let cfg = ArcfaceConfig {
            margin_m: 0.0,
            scale_s: 8.0,
            ..ArcfaceConfig::default()
        };
        let arc = arcface(&emb, &w, &labels, &cfg).unwrap();

        // Independent route: clamped cosine logits -> plain CE.
        let xn = l2_normalize_rows(&emb, 1e-12).matrix;
        let wn = l2_normalize_rows(&w.transpose(), 1e-12).matrix;
        let mut logits = xn.matmul_transpose(&wn);
        for v in logits.data_mut() {
            *v = 8.0 * v.clamp(-1.0 + 1e-6, 1.0 - 1e-6);
        }
        let ce = cross_entropy(&logits, &labels).unwrap();
        assert!((arc.loss - ce.loss).abs() <= ANALYTIC);
    }

    #[test]
    fn arcface_aligned_frozen_value() {
        // Embedding aligned with its class weight, two orthogonal classes,
        // s = 1, m = 0: loss = -log(e / (e + 1)).
        let emb = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = ArcfaceConfig {
            scale_s: 1.0,
            margin_m: 0.0,
            ..ArcfaceConfig::default()
        };
        let r = arcface(&emb, &w, &[0], &cfg).unwrap();
        // The default clamp caps cos at 1 - 1e-6, shifting the value by
        // ~2.7e-7 relative to the unclamped closed form.
        assert!((r.loss - 0.313_261_687_518_222_8).abs() <= 1e-6);
    }

    #[test]
    fn arcface_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(77);
        for trial in 0..30 {
            let n = 1 + (trial % 4);
            let d = 3;
            let c = 2 + (trial % 3);
            let emb = Matrix::from_vec(
                n,
                d,
                (0..n * d).map(|_| rng.next_gaussian() + 0.1).collect(),
            )
            .unwrap();
            let w =
                Matrix::from_vec(d, c, (0..d * c).map(|_| rng.next_gaussian()).collect()).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.below(c as u64) as usize).collect();
            let cfg = ArcfaceConfig {
                scale_s: 4.0,
                margin_m: 0.3,
                ..ArcfaceConfig::default()
            };
            let res = arcface(&emb, &w, &labels, &cfg).unwrap();

            let mut fd_x = Vec::new();
            for idx in 0..n * d {
                let mut plus = emb.clone();
                plus.data_mut()[idx] += FD_STEP;
                let mut minus = emb.clone();
                minus.data_mut()[idx] -= FD_STEP;
                let lp = arcface(&plus, &w, &labels, &cfg).unwrap().loss;
                let lm = arcface(&minus, &w, &labels, &cfg).unwrap().loss;
                fd_x.push((lp - lm) / (2.0 * FD_STEP));
            }
            assert!(
                rel_err(res.grad_embeddings.data(), &fd_x) < GRAD_REL,
                "trial {trial} embeddings"
            );

            let mut fd_w = Vec::new();
            for idx in 0..d * c {
                let mut plus = w.clone();
                plus.data_mut()[idx] += FD_STEP;
                let mut minus = w.clone();
                minus.data_mut()[idx] -= FD_STEP;
                let lp = arcface(&emb, &plus, &labels, &cfg).unwrap().loss;
                let lm = arcface(&emb, &minus, &labels, &cfg).unwrap().loss;
                fd_w.push((lp - lm) / (2.0 * FD_STEP));
            }
            assert!(
                rel_err(res.grad_weights.data(), &fd_w) < GRAD_REL,
                "trial {trial} weights"
            );
        }
    }

    #[test]
    fn arcface_names_degenerate_row() {
        let emb = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let err = arcface(&emb, &w, &[0, 1], &ArcfaceConfig::default()).unwrap_err();
        match err {
            LossError::DegenerateRow { what, index } => {
                assert_eq!(what, "embedding row");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn seesaw_factor_values() {
        assert!((mitigation_factor(100, 10, 0.8) - 0.158_489_319_246_111_34).abs() <= 1e-6);
        assert_eq!(mitigation_factor(10, 100, 0.8), 1.0);
        assert_eq!(compensation_factor(0.1, 0.2, 2.0), 4.0);
        assert_eq!(compensation_factor(0.2, 0.1, 2.0), 1.0);
    }

    #[test]
    fn seesaw_mitigation_monotone_in_p() {
        let mut prev = f64::INFINITY;
        for step in 1..=5 {
            let p = step as f64 * 0.4;
            let m = mitigation_factor(100, 10, p);
            assert!(m < prev, "p={p}");
            prev = m;
        }
    }

    #[test]
    fn seesaw_collapses_to_ce_when_factors_are_one() {
        // gamma = 1, balanced counts after the increment, and the true
        // class holds the max logit so every compensation branch is 1.
        let logits =
            Matrix::from_vec(2, 3, vec![2.0, 0.5, 0.1, -0.2, 1.5, 0.3]).unwrap();
        let labels = [0usize, 1];
        // After observing one of class 0 and one of class 1, counts must be
        // balanced: preload so that the final counts are all equal.
        let mut state = SeesawState::from_counts(vec![4, 4, 5]);
        let cfg = SeesawConfig {
            gamma: 1.0,
            ..SeesawConfig::default()
        };
        let r = seesaw(&logits, &labels, &mut state, &cfg).unwrap();
        assert_eq!(state.counts(), &[5, 5, 5]);
        let ce = cross_entropy(&logits, &labels).unwrap();
        assert!((r.loss - ce.loss).abs() <= ANALYTIC);
        for (a, b) in r.grad_logits.data().iter().zip(ce.grad_logits.data()) {
            assert!((a - b).abs() <= ANALYTIC);
        }
    }

    #[test]
    fn seesaw_counts_equal_label_histogram() {
        let mut state = SeesawState::new(3);
        let cfg = SeesawConfig::default();
        let logits = Matrix::zeros(3, 3);
        seesaw(&logits, &[0, 1, 1], &mut state, &cfg).unwrap();
        seesaw(&logits, &[2, 1, 0], &mut state, &cfg).unwrap();
        assert_eq!(state.counts(), &[2, 3, 1]);
    }

    #[test]
    fn seesaw_value_matches_direct_factor_oracle() {
        // Independent route: compute S_ij with the public factor helpers
        // and the plain softmax, then evaluate the rescaled CE directly.
        let mut rng = SeededRng::new(13);
        for _ in 0..50 {
            let n = 1 + (rng.below(4) as usize);
            let c = 2 + (rng.below(3) as usize);
            let logits =
                Matrix::from_vec(n, c, (0..n * c).map(|_| 2.0 * rng.next_gaussian()).collect())
                    .unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.below(c as u64) as usize).collect();
            let mut state = SeesawState::from_counts(
                (0..c).map(|_| rng.below(50)).collect(),
            );
            let cfg = SeesawConfig::default();
            let mut oracle_state = state.clone();
            let r = seesaw(&logits, &labels, &mut state, &cfg).unwrap();

            oracle_state.observe(&labels);
            let sigma = softmax_rows(&logits).unwrap();
            let mut expected = 0.0;
            for i in 0..n {
                let y = labels[i];
                let mut denom = 0.0;
                for j in 0..c {
                    if j == y {
                        denom += (logits.get(i, j) - logits.get(i, y)).exp();
                    } else {
                        let s = cfg.gamma
                            * mitigation_factor(
                                oracle_state.counts()[y],
                                oracle_state.counts()[j],
                                cfg.p,
                            )
                            * compensation_factor(sigma.get(i, y), sigma.get(i, j), cfg.q);
                        denom += s * (logits.get(i, j) - logits.get(i, y)).exp();
                    }
                }
                expected += denom.ln();
            }
            expected /= n as f64;
            assert!((r.loss - expected).abs() <= 1e-9, "{} vs {expected}", r.loss);
        }
    }

    #[test]
    fn seesaw_gradient_matches_fd_with_frozen_factors() {
        // The factors are stop-gradient constants, so the oracle freezes
        // them from the unperturbed logits and differentiates the rescaled
        // CE as a pure function of z.
        let mut rng = SeededRng::new(21);
        for trial in 0..30 {
            let n = 1 + (trial % 3);
            let c = 2 + (trial % 4);
            let logits =
                Matrix::from_vec(n, c, (0..n * c).map(|_| rng.next_gaussian()).collect()).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.below(c as u64) as usize).collect();
            let mut state =
                SeesawState::from_counts((0..c).map(|_| 1 + rng.below(40)).collect());
            let cfg = SeesawConfig::default();
            let mut frozen_state = state.clone();
            let r = seesaw(&logits, &labels, &mut state, &cfg).unwrap();

            frozen_state.observe(&labels);
            let sigma = softmax_rows(&logits).unwrap();
            let mut s_table = vec![1.0f64; n * c];
            for i in 0..n {
                let y = labels[i];
                for j in 0..c {
                    if j != y {
                        s_table[i * c + j] = cfg.gamma
                            * mitigation_factor(
                                frozen_state.counts()[y],
                                frozen_state.counts()[j],
                                cfg.p,
                            )
                            * compensation_factor(sigma.get(i, y), sigma.get(i, j), cfg.q);
                    }
                }
            }
            let frozen_loss = |z: &Matrix| -> f64 {
                let mut total = 0.0;
                for i in 0..n {
                    let y = labels[i];
                    let mut denom = 0.0;
                    for j in 0..c {
                        denom += s_table[i * c + j] * (z.get(i, j) - z.get(i, y)).exp();
                    }
                    total += denom.ln();
                }
                total / n as f64
            };
            let mut fd = Vec::new();
            for idx in 0..n * c {
                let mut plus = logits.clone();
                plus.data_mut()[idx] += FD_STEP;
                let mut minus = logits.clone();
                minus.data_mut()[idx] -= FD_STEP;
                fd.push((frozen_loss(&plus) - frozen_loss(&minus)) / (2.0 * FD_STEP));
            }
            assert!(
                rel_err(r.grad_logits.data(), &fd) < GRAD_REL,
                "trial {trial}"
            );
        }
    }

    #[test]
    fn ohem_examples() {
        let all = ohem_filter(&[1.0, 2.0, 3.0], 1.0).unwrap();
        assert_eq!(all.indices, vec![0, 1, 2]);
        assert!((all.mean - 2.0).abs() <= ANALYTIC);

        let top = ohem_filter(&[3.0, 1.0, 2.0], 1.0 / 3.0).unwrap();
        assert_eq!(top.indices, vec![0]);
        assert!((top.mean - 3.0).abs() <= ANALYTIC);

        let ties = ohem_filter(&[2.0, 2.0, 1.0], 2.0 / 3.0).unwrap();
        assert_eq!(ties.indices, vec![0, 1]);

        assert!(matches!(ohem_filter(&[], 0.5), Err(LossError::EmptyBatch)));
    }

    #[test]
    fn losses_are_order_invariant() {
        let logits =
            Matrix::from_vec(3, 3, vec![1.0, 0.2, -0.5, 0.0, 2.0, 0.3, -1.0, 0.1, 0.9]).unwrap();
        let labels = [0usize, 1, 2];
        let perm = [2usize, 0, 1];
        let permuted = Matrix::from_rows(&[
            logits.row(perm[0]).to_vec(),
            logits.row(perm[1]).to_vec(),
            logits.row(perm[2]).to_vec(),
        ])
        .unwrap();
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();

        let a = cross_entropy(&logits, &labels).unwrap().loss;
        let b = cross_entropy(&permuted, &plabels).unwrap().loss;
        assert!((a - b).abs() <= ANALYTIC);

        let mut s1 = SeesawState::from_counts(vec![3, 7, 2]);
        let mut s2 = s1.clone();
        let cfg = SeesawConfig::default();
        let x = seesaw(&logits, &labels, &mut s1, &cfg).unwrap().loss;
        let y = seesaw(&permuted, &plabels, &mut s2, &cfg).unwrap().loss;
        assert!((x - y).abs() <= ANALYTIC);
        assert_eq!(s1.counts(), s2.counts());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(3);
        for trial in 0..30 {
            let n = 1 + (trial % 4);
            let c = 2 + (trial % 3);
            let logits =
                Matrix::from_vec(n, c, (0..n * c).map(|_| rng.next_gaussian()).collect()).unwrap();
            let mut targets = Matrix::zeros(n, c);
            for i in 0..n {
                let raw: Vec<f64> = (0..c).map(|_| rng.next_f64() + 0.05).collect();
                let sum: f64 = raw.iter().sum();
                for (j, v) in raw.iter().enumerate() {
                    targets.set(i, j, v / sum);
                }
            }
            let r = soft_target_ce(&logits, &targets).unwrap();
            let mut fd = Vec::new();
            for idx in 0..n * c {
                let mut plus = logits.clone();
                plus.data_mut()[idx] += FD_STEP;
                let mut minus = logits.clone();
                minus.data_mut()[idx] -= FD_STEP;
                let lp = soft_target_ce(&plus, &targets).unwrap().loss;
                let lm = soft_target_ce(&minus, &targets).unwrap().loss;
                fd.push((lp - lm) / (2.0 * FD_STEP));
            }
            assert!(rel_err(r.grad_logits.data(), &fd) < GRAD_REL, "trial {trial}");
        }
    }
}
