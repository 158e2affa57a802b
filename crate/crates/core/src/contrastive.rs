//! Self-supervised objectives and the two SSL trainers: momentum-encoder
//! pretraining (symmetrized contrastive loss, keys from a momentum copy
//! that receives no gradient) and joint supervised/self-supervised
//! training with a weighted sum of the two losses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::AugmentPolicy;
use crate::losses::{LossChoice, LossError};
use crate::model::optim::{accumulate_and_step, OptimizerState};
use crate::model::{
    encode_set, head_backward, head_forward, ModelError, ModelParams, ParamGrads, ParamSet,
};
use crate::numerics::{l2_normalize_rows, log_sum_exp, softmax_rows, Matrix, SeededRng};
use crate::tolerances::NORMALIZED_INPUT;
use crate::trainer::{
    augment_rows, chunk_batches, epoch_order, gather_rows, supervised_batch, MixupSpec,
    TrainerError,
};

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("{which} row {row} is not l2-normalized (norm {norm})")]
    NotNormalized {
        which: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("empty loader")]
    EmptyLoader,
    #[error("invalid contrastive config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
}

/// Temperature and momentum settings. The temperature default follows the
/// reported 0.25; the momentum coefficient is not reported and defaults to
/// 0.99.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub momentum_m: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.25,
            momentum_m: 0.99,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ContrastiveError::InvalidConfig(
                "tau must be positive and finite".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.momentum_m) {
            return Err(ContrastiveError::InvalidConfig(
                "momentum_m must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Supervised / self-supervised balance; defaults follow the reported
/// 0.9 / 0.1.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct JointConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            lambda1: 0.9,
            lambda2: 0.1,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda1 + self.lambda2 <= 0.0 {
            return Err(ContrastiveError::InvalidConfig(
                "lambdas must be non-negative with a positive sum".into(),
            ));
        }
        Ok(())
    }
}

fn check_normalized(m: &Matrix, which: &'static str) -> Result<(), ContrastiveError> {
    for r in 0..m.rows() {
        let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORMALIZED_INPUT {
            return Err(ContrastiveError::NotNormalized { which, row: r, norm });
        }
    }
    Ok(())
}

/// InfoNCE result; key gradients are provided for callers whose keys are
/// trainable (the momentum trainers ignore them).
#[derive(Debug, Clone)]
pub struct InfoNceResult {
    pub loss: f64,
    pub grad_queries: Matrix,
    pub grad_keys: Matrix,
}

/// InfoNCE over dot-product similarities divided by `tau`: each query is
/// classified against all keys with its positive key as the target, mean
/// over queries. Inputs must be row-normalized.
pub fn info_nce(
    queries: &Matrix,
    keys: &Matrix,
    positives: &[usize],
    tau: f64,
) -> Result<InfoNceResult, ContrastiveError> {
    if queries.cols() != keys.cols() {
        return Err(ContrastiveError::ShapeMismatch(format!(
            "query dim {} vs key dim {}",
            queries.cols(),
            keys.cols()
        )));
    }
    if positives.len() != queries.rows() {
        return Err(ContrastiveError::ShapeMismatch(format!(
            "{} queries vs {} positives",
            queries.rows(),
            positives.len()
        )));
    }
    if queries.rows() == 0 || keys.rows() == 0 {
        return Err(ContrastiveError::EmptyLoader);
    }
    if positives.iter().any(|&p| p >= keys.rows()) {
        return Err(ContrastiveError::ShapeMismatch(
            "positive index out of range".into(),
        ));
    }
    check_normalized(queries, "queries")?;
    check_normalized(keys, "keys")?;

    let n = queries.rows();
    let mut logits = queries.matmul_transpose(keys);
    logits.scale(1.0 / tau);
    let probs = softmax_rows(&logits).map_err(LossError::from)?;

    let mut loss = 0.0;
    for (i, &p) in positives.iter().enumerate() {
        loss += log_sum_exp(logits.row(i)).map_err(LossError::from)? - logits.get(i, p);
    }
    loss /= n as f64;

    // dL/dlogits = (softmax - onehot(positive)) / n; chain through the
    // scaled dot product to both sides.
    let mut dlogits = probs;
    for (i, &p) in positives.iter().enumerate() {
        dlogits.set(i, p, dlogits.get(i, p) - 1.0);
    }
    dlogits.scale(1.0 / n as f64);
    let mut grad_queries = dlogits.matmul(keys);
    grad_queries.scale(1.0 / tau);
    let mut grad_keys = dlogits.transpose_matmul(queries);
    grad_keys.scale(1.0 / tau);

    Ok(InfoNceResult {
        loss,
        grad_queries,
        grad_keys,
    })
}

/// Result of the symmetrized contrastive loss; gradients flow to the two
/// query views only (keys come from the momentum encoder).
#[derive(Debug, Clone)]
pub struct SymmetrizedCtrResult {
    pub loss: f64,
    pub grad_q1: Matrix,
    pub grad_q2: Matrix,
}

/// One ctr term: cross entropy over `q k^T / tau` with positives on the
/// diagonal, mean over rows, scaled by `2 tau`. Returns the loss and the
/// query gradient.
fn ctr(q: &Matrix, k: &Matrix, tau: f64) -> Result<(f64, Matrix), ContrastiveError> {
    let n = q.rows();
    let mut logits = q.matmul_transpose(k);
    logits.scale(1.0 / tau);
    let probs = softmax_rows(&logits).map_err(LossError::from)?;
    let mut loss = 0.0;
    for i in 0..n {
        loss += log_sum_exp(logits.row(i)).map_err(LossError::from)? - logits.get(i, i);
    }
    loss = 2.0 * tau * loss / n as f64;

    let mut dlogits = probs;
    for i in 0..n {
        dlogits.set(i, i, dlogits.get(i, i) - 1.0);
    }
    // 2 tau * (1/n) * dCE/dlogits, then 1/tau from the scaled dot product.
    dlogits.scale(2.0 / n as f64);
    let grad_q = dlogits.matmul(k);
    Ok((loss, grad_q))
}

/// Symmetrized momentum-contrastive loss:
/// `ctr(q1, k2) + ctr(q2, k1)`, each term scaled by `2 tau`. All four
/// inputs must be N x d and row-normalized.
pub fn symmetrized_ctr(
    q1: &Matrix,
    q2: &Matrix,
    k1: &Matrix,
    k2: &Matrix,
    tau: f64,
) -> Result<SymmetrizedCtrResult, ContrastiveError> {
    let shape = (q1.rows(), q1.cols());
    for (name, m) in [("q2", q2), ("k1", k1), ("k2", k2)] {
        if (m.rows(), m.cols()) != shape {
            return Err(ContrastiveError::ShapeMismatch(format!(
                "{name} is {}x{}, expected {}x{}",
                m.rows(),
                m.cols(),
                shape.0,
                shape.1
            )));
        }
    }
    if q1.rows() == 0 {
        return Err(ContrastiveError::EmptyLoader);
    }
    for (name, m) in [("q1", q1), ("q2", q2), ("k1", k1), ("k2", k2)] {
        check_normalized(m, match name {
            "q1" => "q1",
            "q2" => "q2",
            "k1" => "k1",
            _ => "k2",
        })?;
    }
    let (l1, g1) = ctr(q1, k2, tau)?;
    let (l2, g2) = ctr(q2, k1, tau)?;
    Ok(SymmetrizedCtrResult {
        loss: l1 + l2,
        grad_q1: g1,
        grad_q2: g2,
    })
}

/// 2N-view contrastive loss over normalized projections: rows `2i` and
/// `2i + 1` are the two views of sample `i`; each view is classified
/// against the other `2N - 1` views with its partner as the positive.
#[derive(Debug, Clone)]
pub struct NtXentResult {
    pub loss: f64,
    pub grad: Matrix,
}

pub fn nt_xent(views: &Matrix, tau: f64) -> Result<NtXentResult, ContrastiveError> {
    let total = views.rows();
    if total == 0 || total % 2 != 0 {
        return Err(ContrastiveError::ShapeMismatch(format!(
            "need an even, positive number of views, got {total}"
        )));
    }
    check_normalized(views, "views")?;
    let sims = views.matmul_transpose(views);
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(total, views.cols());
    let inv_count = 1.0 / total as f64;
    let mut row_logits = vec![0.0f64; total - 1];
    for u in 0..total {
        let partner = u ^ 1;
        let mut idx = 0;
        for v in 0..total {
            if v != u {
                row_logits[idx] = sims.get(u, v) / tau;
                idx += 1;
            }
        }
        let lse = log_sum_exp(&row_logits).map_err(LossError::from)?;
        loss += lse - sims.get(u, partner) / tau;
        // Softmax over the row, then chain into both endpoints of each
        // similarity.
        let mut idx = 0;
        for v in 0..total {
            if v == u {
                continue;
            }
            let p = (row_logits[idx] - lse).exp();
            idx += 1;
            let coeff =
                (p - if v == partner { 1.0 } else { 0.0 }) * inv_count / tau;
            for d in 0..views.cols() {
                grad.set(u, d, grad.get(u, d) + coeff * views.get(v, d));
                grad.set(v, d, grad.get(v, d) + coeff * views.get(u, d));
            }
        }
    }
    loss *= inv_count;
    Ok(NtXentResult { loss, grad })
}

/// Cosine similarity; rejects zero vectors. The result lies in [-1, 1] up
/// to f64 rounding.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, ContrastiveError> {
    if a.len() != b.len() {
        return Err(ContrastiveError::ShapeMismatch(format!(
            "{} vs {} dims",
            a.len(),
            b.len()
        )));
    }
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(ContrastiveError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Momentum update `key = m * key + (1 - m) * query`, element-wise over
/// structurally identical parameter sets. Applied after each optimizer
/// step on the query path.
pub fn momentum_update(
    key: &mut ParamSet,
    query: &ParamSet,
    m: f64,
) -> Result<(), ContrastiveError> {
    key.same_structure(query)?;
    let query_named = query.named();
    for ((_, k), (_, q)) in key.named_mut().into_iter().zip(query_named) {
        for (kv, qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = m * *kv + (1.0 - m) * qv;
        }
    }
    Ok(())
}

/// Weighted combination of a supervised and a self-supervised loss
/// computed on the same parameter set: the value and the gradients combine
/// linearly.
pub fn joint_loss(
    l_sup: f64,
    grad_sup: &ParamGrads,
    l_self: f64,
    grad_self: &ParamGrads,
    cfg: &JointConfig,
) -> Result<(f64, ParamGrads), ContrastiveError> {
    cfg.validate()?;
    grad_sup.same_structure(grad_self)?;
    let mut combined = ParamSet::zeros_like(grad_sup);
    combined.add_scaled(grad_sup, cfg.lambda1);
    combined.add_scaled(grad_self, cfg.lambda2);
    Ok((cfg.lambda1 * l_sup + cfg.lambda2 * l_self, combined))
}

/// Chain a gradient on row-normalized vectors back to the raw vectors:
/// `g_raw = (g - <g, x_hat> x_hat) / |x|` per row.
pub(crate) fn backprop_row_normalization(raw: &Matrix, grad_normed: &Matrix) -> Matrix {
    let normed = l2_normalize_rows(raw, 1e-12);
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for r in 0..raw.rows() {
        let norm = raw.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        debug_assert!(!normed.degenerate[r], "degenerate row in normalization");
        let xhat = normed.matrix.row(r);
        let g = grad_normed.row(r);
        let dot: f64 = g.iter().zip(xhat).map(|(a, b)| a * b).sum();
        for c in 0..raw.cols() {
            out.set(r, c, (g[c] - dot * xhat[c]) / norm);
        }
    }
    out
}

/// Per-epoch statistics from [`moco_pretrain_epoch`].
#[derive(Debug, Clone)]
pub struct MocoEpochStats {
    pub mean_loss: f64,
    pub batches: usize,
}

/// One momentum-contrastive pretraining epoch over the unlabeled pool.
///
/// Per batch: two augmentations of the same samples; queries run through
/// encoder + projection + prediction, keys through the momentum copy's
/// encoder + projection with no gradient; symmetrized loss; optimizer step
/// on the query path; momentum update of the key copy after each step.
#[allow(clippy::too_many_arguments)]
pub fn moco_pretrain_epoch(
    query: &mut ModelParams,
    key: &mut ParamSet,
    opt: &mut OptimizerState,
    features: &Matrix,
    meta: &Matrix,
    pool: &[usize],
    policy: &AugmentPolicy,
    cfg: &ContrastiveConfig,
    root_rng: &SeededRng,
    epoch: u64,
    batch_size: usize,
) -> Result<MocoEpochStats, ContrastiveError> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(ContrastiveError::EmptyLoader);
    }
    let order = epoch_order(root_rng, "moco-batch-order", epoch, pool);
    let mut aug1 = root_rng.child_indexed("moco-aug-1", epoch);
    let mut aug2 = root_rng.child_indexed("moco-aug-2", epoch);

    let mut total_loss = 0.0;
    let mut batches = 0;
    for batch in chunk_batches(&order, batch_size) {
        let (raw, batch_meta, _) = gather_rows(features, meta, None, &batch);
        let x1 = augment_rows(&raw, policy, &mut aug1);
        let x2 = augment_rows(&raw, policy, &mut aug2);

        let step = |view: &Matrix| -> Result<_, ContrastiveError> {
            let cache = encode_set(&query.config, &query.set, view, &batch_meta)?;
            let (proj, proj_cache) = head_forward(&query.set.projection, cache.embedding());
            let (pred, pred_cache) = head_forward(&query.set.prediction, &proj);
            Ok((cache, proj_cache, pred_cache, pred))
        };
        let (cache1, proj_cache1, pred_cache1, q1_raw) = step(&x1)?;
        let (cache2, proj_cache2, pred_cache2, q2_raw) = step(&x2)?;

        let key_view = |view: &Matrix| -> Result<Matrix, ContrastiveError> {
            let cache = encode_set(&query.config, key, view, &batch_meta)?;
            let (proj, _) = head_forward(&key.projection, cache.embedding());
            Ok(l2_normalize_rows(&proj, 1e-12).matrix)
        };
        let k1 = key_view(&x1)?;
        let k2 = key_view(&x2)?;

        let q1 = l2_normalize_rows(&q1_raw, 1e-12).matrix;
        let q2 = l2_normalize_rows(&q2_raw, 1e-12).matrix;
        let res = symmetrized_ctr(&q1, &q2, &k1, &k2, cfg.tau)?;
        total_loss += res.loss;
        batches += 1;

        let mut grads = ParamSet::zeros_like(&query.set);
        for (raw_q, grad_n, cache, proj_cache, pred_cache) in [
            (&q1_raw, &res.grad_q1, &cache1, &proj_cache1, &pred_cache1),
            (&q2_raw, &res.grad_q2, &cache2, &proj_cache2, &pred_cache2),
        ] {
            let g_pred_out = backprop_row_normalization(raw_q, grad_n);
            let g_proj = head_backward(
                &query.set.prediction,
                pred_cache,
                &g_pred_out,
                &mut grads.prediction,
            );
            let g_emb = head_backward(
                &query.set.projection,
                proj_cache,
                &g_proj,
                &mut grads.projection,
            );
            crate::model::backward_encoder(query, cache, &g_emb, &mut grads);
        }

        let stepped = accumulate_and_step(&mut query.set, &grads, opt)?;
        if stepped {
            momentum_update(key, &query.set, cfg.momentum_m)?;
        }
    }
    Ok(MocoEpochStats {
        mean_loss: total_loss / batches as f64,
        batches,
    })
}

/// Loss breakdown from one joint epoch.
#[derive(Debug, Clone)]
pub struct JointEpochStats {
    pub mean_supervised: f64,
    pub mean_self_supervised: f64,
    pub batches: usize,
}

/// One joint supervised + self-supervised epoch.
///
/// The labeled stream drives the epoch (one optimizer step per labeled
/// batch); the unlabeled pool is cycled modulo its batch count. The
/// labeled branch reuses the supervised step exactly as the pure
/// supervised trainer runs it; the unlabeled branch computes the 2N-view
/// loss on projections; the two gradients combine via [`joint_loss`].
#[allow(clippy::too_many_arguments)]
pub fn simclr_joint_epoch(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    loss: &LossChoice,
    seesaw: Option<&mut crate::losses::SeesawState>,
    features: &Matrix,
    meta: &Matrix,
    labels: &[usize],
    train_idx: &[usize],
    unlabeled_idx: &[usize],
    policy: &AugmentPolicy,
    mixup: Option<MixupSpec>,
    cfg: &ContrastiveConfig,
    joint: &JointConfig,
    root_rng: &SeededRng,
    epoch: u64,
    batch_size: usize,
) -> Result<JointEpochStats, ContrastiveError> {
    cfg.validate()?;
    joint.validate()?;
    if train_idx.is_empty() || unlabeled_idx.is_empty() {
        return Err(ContrastiveError::EmptyLoader);
    }
    let labeled_order = epoch_order(root_rng, "batch-order", epoch, train_idx);
    let labeled_batches = chunk_batches(&labeled_order, batch_size);
    let unlabeled_order = epoch_order(root_rng, "ssl-batch-order", epoch, unlabeled_idx);
    let unlabeled_batches = chunk_batches(&unlabeled_order, batch_size);

    let mut aug_sup = root_rng.child_indexed("augment", epoch);
    let mut mix_rng = root_rng.child_indexed("mixup", epoch);
    let mut aug1 = root_rng.child_indexed("ssl-aug-1", epoch);
    let mut aug2 = root_rng.child_indexed("ssl-aug-2", epoch);

    let mut seesaw = seesaw;
    let mut sup_total = 0.0;
    let mut self_total = 0.0;
    let mut batches = 0;
    for (step_idx, batch) in labeled_batches.iter().enumerate() {
        let (raw, batch_meta, batch_labels) =
            gather_rows(features, meta, Some(labels), batch);
        let x = augment_rows(&raw, policy, &mut aug_sup);
        let sup = supervised_batch(
            params,
            loss,
            seesaw.as_deref_mut(),
            &x,
            &batch_meta,
            &batch_labels,
            mixup,
            &mut mix_rng,
        )?;

        let ub = &unlabeled_batches[step_idx % unlabeled_batches.len()];
        let (u_raw, u_meta, _) = gather_rows(features, meta, None, ub);
        let v1 = augment_rows(&u_raw, policy, &mut aug1);
        let v2 = augment_rows(&u_raw, policy, &mut aug2);
        let n = u_raw.rows();

        let cache1 = encode_set(&params.config, &params.set, &v1, &u_meta)?;
        let (proj1, proj_cache1) = head_forward(&params.set.projection, cache1.embedding());
        let cache2 = encode_set(&params.config, &params.set, &v2, &u_meta)?;
        let (proj2, proj_cache2) = head_forward(&params.set.projection, cache2.embedding());

        // Interleave the two views: rows 2i / 2i+1 belong to sample i.
        let mut stacked = Matrix::zeros(2 * n, proj1.cols());
        for i in 0..n {
            for d in 0..proj1.cols() {
                stacked.set(2 * i, d, proj1.get(i, d));
                stacked.set(2 * i + 1, d, proj2.get(i, d));
            }
        }
        let normed = l2_normalize_rows(&stacked, 1e-12).matrix;
        let nt = nt_xent(&normed, cfg.tau)?;
        let g_stacked = backprop_row_normalization(&stacked, &nt.grad);

        let mut g_proj1 = Matrix::zeros(n, proj1.cols());
        let mut g_proj2 = Matrix::zeros(n, proj1.cols());
        for i in 0..n {
            for d in 0..proj1.cols() {
                g_proj1.set(i, d, g_stacked.get(2 * i, d));
                g_proj2.set(i, d, g_stacked.get(2 * i + 1, d));
            }
        }
        let mut g_self = ParamSet::zeros_like(&params.set);
        let g_emb1 = head_backward(
            &params.set.projection,
            &proj_cache1,
            &g_proj1,
            &mut g_self.projection,
        );
        crate::model::backward_encoder(params, &cache1, &g_emb1, &mut g_self);
        let g_emb2 = head_backward(
            &params.set.projection,
            &proj_cache2,
            &g_proj2,
            &mut g_self.projection,
        );
        crate::model::backward_encoder(params, &cache2, &g_emb2, &mut g_self);

        let (joint_value, joint_grads) =
            joint_loss(sup.loss, &sup.grads, nt.loss, &g_self, joint)?;
        let _ = joint_value;
        sup_total += sup.loss;
        self_total += nt.loss;
        batches += 1;

        accumulate_and_step(&mut params.set, &joint_grads, opt)?;
    }
    Ok(JointEpochStats {
        mean_supervised: sup_total / batches as f64,
        mean_self_supervised: self_total / batches as f64,
        batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tolerances::{ANALYTIC, FD_STEP, FROZEN, GRAD_NORM_FLOOR, GRAD_REL};

    fn normalize_rows(m: &Matrix) -> Matrix {
        l2_normalize_rows(m, 1e-12).matrix
    }

    fn random_normalized(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
        let raw = Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.next_gaussian()).collect(),
        )
        .unwrap();
        normalize_rows(&raw)
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
    fn info_nce_uniform_similarities() {
        // All similarities equal: loss = ln(K + 1) per query.
        let dim = 4;
        let q = Matrix::from_vec(1, dim, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        // Keys all identical: any key gives the same similarity.
        let keys = Matrix::from_vec(
            4,
            dim,
            vec![
                0.0, 1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let r = info_nce(&q, &keys, &[0], 0.25).unwrap();
        assert!((r.loss - 4.0_f64.ln()).abs() <= ANALYTIC);
    }

    #[test]
    fn info_nce_monotone_in_positive_similarity() {
        // Raising the positive similarity with everything else fixed must
        // strictly decrease the loss.
        let keys = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let mut prev = f64::INFINITY;
        for steps in 0..5 {
            let angle = 1.2 - 0.25 * steps as f64;
            let q = Matrix::from_vec(1, 2, vec![angle.cos(), angle.sin()]).unwrap();
            let r = info_nce(&q, &keys, &[0], 0.25).unwrap();
            assert!(r.loss < prev);
            prev = r.loss;
        }
    }

    #[test]
    fn info_nce_matches_brute_force_oracle() {
        // Brute-force softmax-CE over similarity rows, written directly.
        let mut rng = SeededRng::new(301);
        let q = random_normalized(4, 5, &mut rng);
        let keys = random_normalized(6, 5, &mut rng);
        let positives = [2usize, 0, 5, 3];
        let tau = 0.25;
        let r = info_nce(&q, &keys, &positives, tau).unwrap();

        let mut expected = 0.0;
        for (i, &p) in positives.iter().enumerate() {
            let sims: Vec<f64> = (0..keys.rows())
                .map(|j| {
                    q.row(i)
                        .iter()
                        .zip(keys.row(j))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / tau
                })
                .collect();
            let denom: f64 = sims.iter().map(|s| s.exp()).sum();
            expected += -(sims[p].exp() / denom).ln();
        }
        expected /= q.rows() as f64;
        assert!((r.loss - expected).abs() <= 1e-9);
    }

    #[test]
    fn info_nce_rejects_unnormalized() {
        let q = Matrix::from_vec(1, 2, vec![2.0, 0.0]).unwrap();
        let keys = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            info_nce(&q, &keys, &[0], 0.25),
            Err(ContrastiveError::NotNormalized { .. })
        ));
    }

    #[test]
    fn info_nce_gradients_match_fd_through_normalization() {
        // The training path normalizes first, so the oracle differentiates
        // loss(normalize(x)) and the analytic route chains the documented
        // normalization jacobian.
        let mut rng = SeededRng::new(302);
        for trial in 0..20 {
            let nq = 2 + trial % 2;
            let nk = 3 + trial % 3;
            let d = 3;
            let q_raw = Matrix::from_vec(
                nq,
                d,
                (0..nq * d).map(|_| rng.next_gaussian() + 0.2).collect(),
            )
            .unwrap();
            let k_raw =
                Matrix::from_vec(nk, d, (0..nk * d).map(|_| rng.next_gaussian() + 0.2).collect())
                    .unwrap();
            let positives: Vec<usize> =
                (0..nq).map(|_| rng.below(nk as u64) as usize).collect();
            let tau = 0.25;

            let qn = normalize_rows(&q_raw);
            let kn = normalize_rows(&k_raw);
            let res = info_nce(&qn, &kn, &positives, tau).unwrap();
            let analytic_q = backprop_row_normalization(&q_raw, &res.grad_queries);
            let analytic_k = backprop_row_normalization(&k_raw, &res.grad_keys);

            let loss_at = |qr: &Matrix, kr: &Matrix| -> f64 {
                info_nce(&normalize_rows(qr), &normalize_rows(kr), &positives, tau)
                    .unwrap()
                    .loss
            };
            let mut fd_q = Vec::new();
            for idx in 0..nq * d {
                let mut plus = q_raw.clone();
                plus.data_mut()[idx] += FD_STEP;
                let mut minus = q_raw.clone();
                minus.data_mut()[idx] -= FD_STEP;
                fd_q.push((loss_at(&plus, &k_raw) - loss_at(&minus, &k_raw)) / (2.0 * FD_STEP));
            }
            assert!(rel_err(analytic_q.data(), &fd_q) < GRAD_REL, "trial {trial} q");

            let mut fd_k = Vec::new();
            for idx in 0..nk * d {
                let mut plus = k_raw.clone();
                plus.data_mut()[idx] += FD_STEP;
                let mut minus = k_raw.clone();
                minus.data_mut()[idx] -= FD_STEP;
                fd_k.push((loss_at(&q_raw, &plus) - loss_at(&q_raw, &minus)) / (2.0 * FD_STEP));
            }
            assert!(rel_err(analytic_k.data(), &fd_k) < GRAD_REL, "trial {trial} k");
        }
    }

    #[test]
    fn symmetrized_uniform_value() {
        // All pairwise similarities equal at N=4, tau=0.25: each term is
        // 2 tau ln 4, the total twice that.
        let q = Matrix::from_vec(
            4,
            2,
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let r = symmetrized_ctr(&q, &q, &q, &q, 0.25).unwrap();
        let per_ctr = 2.0 * 0.25 * 4.0_f64.ln();
        assert!((per_ctr - 0.693_147_180_559_945_3).abs() <= FROZEN);
        assert!((r.loss - 2.0 * per_ctr).abs() <= ANALYTIC);
        assert!((r.loss - 1.386_294_361_119_890_6).abs() <= FROZEN);
    }

    #[test]
    fn symmetrized_orthonormal_closed_form() {
        // q1 = k2 = orthonormal basis, tau = 1: diagonal similarity 1,
        // off-diagonal 0, each ctr = 2 * (-log(e / (e + N - 1))).
        let n = 3;
        let mut eye = Matrix::zeros(n, n);
        for i in 0..n {
            eye.set(i, i, 1.0);
        }
        let r = symmetrized_ctr(&eye, &eye, &eye, &eye, 1.0).unwrap();
        let per_ctr = 2.0 * -(std::f64::consts::E / (std::f64::consts::E + (n - 1) as f64)).ln();
        assert!((per_ctr - 1.102_889_427_864_102_2).abs() <= FROZEN);
        assert!((r.loss - 2.0 * per_ctr).abs() <= ANALYTIC);
    }

    #[test]
    fn symmetrized_swap_invariance() {
        let mut rng = SeededRng::new(55);
        let q1 = random_normalized(3, 4, &mut rng);
        let q2 = random_normalized(3, 4, &mut rng);
        let k1 = random_normalized(3, 4, &mut rng);
        let k2 = random_normalized(3, 4, &mut rng);
        let a = symmetrized_ctr(&q1, &q2, &k1, &k2, 0.25).unwrap();
        let b = symmetrized_ctr(&q2, &q1, &k2, &k1, 0.25).unwrap();
        assert!((a.loss - b.loss).abs() <= ANALYTIC);
    }

    #[test]
    fn symmetrized_rejects_shape_mismatch() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            symmetrized_ctr(&a, &a, &a, &b, 0.25),
            Err(ContrastiveError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn symmetrized_gradients_match_fd() {
        let mut rng = SeededRng::new(66);
        for trial in 0..20 {
            let n = 2 + trial % 3;
            let d = 3;
            let q1_raw =
                Matrix::from_vec(n, d, (0..n * d).map(|_| rng.next_gaussian() + 0.1).collect())
                    .unwrap();
            let q2_raw =
                Matrix::from_vec(n, d, (0..n * d).map(|_| rng.next_gaussian() + 0.1).collect())
                    .unwrap();
            let k1 = random_normalized(n, d, &mut rng);
            let k2 = random_normalized(n, d, &mut rng);
            let tau = 0.25;

            let res =
                symmetrized_ctr(&normalize_rows(&q1_raw), &normalize_rows(&q2_raw), &k1, &k2, tau)
                    .unwrap();
            let analytic1 = backprop_row_normalization(&q1_raw, &res.grad_q1);
            let analytic2 = backprop_row_normalization(&q2_raw, &res.grad_q2);

            let loss_at = |a: &Matrix, b: &Matrix| -> f64 {
                symmetrized_ctr(&normalize_rows(a), &normalize_rows(b), &k1, &k2, tau)
                    .unwrap()
                    .loss
            };
            let mut fd1 = Vec::new();
            let mut fd2 = Vec::new();
            for idx in 0..n * d {
                let mut plus = q1_raw.clone();
                plus.data_mut()[idx] += FD_STEP;
                let mut minus = q1_raw.clone();
                minus.data_mut()[idx] -= FD_STEP;
                fd1.push((loss_at(&plus, &q2_raw) - loss_at(&minus, &q2_raw)) / (2.0 * FD_STEP));
                let mut plus2 = q2_raw.clone();
                plus2.data_mut()[idx] += FD_STEP;
                let mut minus2 = q2_raw.clone();
                minus2.data_mut()[idx] -= FD_STEP;
                fd2.push(
                    (loss_at(&q1_raw, &plus2) - loss_at(&q1_raw, &minus2)) / (2.0 * FD_STEP),
                );
            }
            assert!(rel_err(analytic1.data(), &fd1) < GRAD_REL, "trial {trial} q1");
            assert!(rel_err(analytic2.data(), &fd2) < GRAD_REL, "trial {trial} q2");
        }
    }

    #[test]
    fn nt_xent_gradients_match_fd() {
        let mut rng = SeededRng::new(77);
        for trial in 0..20 {
            let n = 2 + trial % 2; // samples; 2n views
            let d = 3;
            let raw = Matrix::from_vec(
                2 * n,
                d,
                (0..2 * n * d).map(|_| rng.next_gaussian() + 0.1).collect(),
            )
            .unwrap();
            let tau = 0.25;
            let res = nt_xent(&normalize_rows(&raw), tau).unwrap();
            let analytic = backprop_row_normalization(&raw, &res.grad);
            let loss_at =
                |m: &Matrix| -> f64 { nt_xent(&normalize_rows(m), tau).unwrap().loss };
            let mut fd = Vec::new();
            for idx in 0..2 * n * d {
                let mut plus = raw.clone();
                plus.data_mut()[idx] += FD_STEP;
                let mut minus = raw.clone();
                minus.data_mut()[idx] -= FD_STEP;
                fd.push((loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP));
            }
            assert!(rel_err(analytic.data(), &fd) < GRAD_REL, "trial {trial}");
        }
    }

    #[test]
    fn cosine_sim_cases() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() <= ANALYTIC);
        assert!((cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap()).abs() <= ANALYTIC);
        assert!(
            (cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.707_106_781_186_547_5).abs()
                <= FROZEN
        );
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(ContrastiveError::ZeroVector)
        ));
    }

    #[test]
    fn momentum_update_endpoints_and_midpoint() {
        let mut rng = SeededRng::new(12);
        let cfg = crate::model::ModelConfig {
            feature_dim: 2,
            num_meta: 1,
            meta_dim: 1,
            hidden: vec![3],
            embed_dim: 2,
            num_classes: 2,
            arcface_mode: false,
            arcface_scale: 1.0,
            proj_hidden: 2,
            proj_dim: 2,
            pred_hidden: 2,
        };
        let query = ModelParams::init(&cfg, &mut rng).set;
        let original = ModelParams::init(&cfg, &mut rng).set;

        let mut key = original.clone();
        momentum_update(&mut key, &query, 1.0).unwrap();
        assert_eq!(key, original);

        let mut key = original.clone();
        momentum_update(&mut key, &query, 0.0).unwrap();
        assert_eq!(key, query);

        let mut two = original.clone();
        for (_, m) in two.named_mut() {
            for v in m.data_mut() {
                *v = 2.0;
            }
        }
        let mut four = original.clone();
        for (_, m) in four.named_mut() {
            for v in m.data_mut() {
                *v = 4.0;
            }
        }
        momentum_update(&mut two, &four, 0.5).unwrap();
        for (_, m) in two.named() {
            assert!(m.data().iter().all(|v| (*v - 3.0).abs() <= ANALYTIC));
        }
    }

    #[test]
    fn momentum_update_is_a_contraction() {
        let mut rng = SeededRng::new(13);
        let cfg = crate::model::ModelConfig::default();
        let query = ModelParams::init(&cfg, &mut rng).set;
        let mut key = ModelParams::init(&cfg, &mut rng).set;
        let m = 0.9;

        let mut diff_before = key.clone();
        diff_before.add_scaled(&query, -1.0);
        let before = diff_before.l2_norm();

        momentum_update(&mut key, &query, m).unwrap();
        let mut diff_after = key.clone();
        diff_after.add_scaled(&query, -1.0);
        let after = diff_after.l2_norm();
        assert!((after - m * before).abs() <= 1e-9 * before.max(1.0));
    }

    #[test]
    fn momentum_update_rejects_structure_mismatch() {
        let mut rng = SeededRng::new(14);
        let a = ModelParams::init(&crate::model::ModelConfig::default(), &mut rng).set;
        let mut small = crate::model::ModelConfig::default();
        small.embed_dim = 8;
        let mut b = ModelParams::init(&small, &mut rng).set;
        assert!(momentum_update(&mut b, &a, 0.5).is_err());
    }

    #[test]
    fn joint_loss_endpoints_and_arithmetic() {
        let mut rng = SeededRng::new(15);
        let cfg = crate::model::ModelConfig::default();
        let g1 = ModelParams::init(&cfg, &mut rng).set;
        let g2 = ModelParams::init(&cfg, &mut rng).set;

        let (pure, grads) = joint_loss(
            1.5,
            &g1,
            9.0,
            &g2,
            &JointConfig {
                lambda1: 1.0,
                lambda2: 0.0,
            },
        )
        .unwrap();
        assert_eq!(pure, 1.5);
        for ((_, a), (_, b)) in grads.named().iter().zip(g1.named().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= ANALYTIC);
            }
        }

        let (v, _) = joint_loss(1.0, &g1, 2.0, &g2, &JointConfig::default()).unwrap();
        assert!((v - 1.1).abs() <= ANALYTIC);
    }

    #[test]
    fn joint_loss_is_linear() {
        let mut rng = SeededRng::new(16);
        let cfg = crate::model::ModelConfig::default();
        let g1 = ModelParams::init(&cfg, &mut rng).set;
        let g2 = ModelParams::init(&cfg, &mut rng).set;
        let jc = JointConfig::default();
        let a = 3.5;

        let (v1, grads1) = joint_loss(1.2, &g1, -0.4, &g2, &jc).unwrap();
        let mut g1s = g1.clone();
        g1s.scale(a);
        let mut g2s = g2.clone();
        g2s.scale(a);
        let (v2, grads2) = joint_loss(a * 1.2, &g1s, a * -0.4, &g2s, &jc).unwrap();
        assert!((v2 - a * v1).abs() <= ANALYTIC);
        for ((_, x), (_, y)) in grads2.named().iter().zip(grads1.named().iter()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - a * q).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn joint_gradient_matches_fd() {
        // Finite-difference check of the combination rule itself on a
        // scalar function pair: f = l1 + l2 composed linearly.
        let jc = JointConfig {
            lambda1: 0.7,
            lambda2: 0.3,
        };
        let f_sup = |x: f64| (x * 1.3).sin();
        let f_self = |x: f64| (x - 0.2) * (x - 0.2);
        let x0 = 0.8_f64;
        let joint_at = |x: f64| jc.lambda1 * f_sup(x) + jc.lambda2 * f_self(x);
        let analytic = jc.lambda1 * 1.3 * (x0 * 1.3).cos() + jc.lambda2 * 2.0 * (x0 - 0.2);
        let fd = (joint_at(x0 + FD_STEP) - joint_at(x0 - FD_STEP)) / (2.0 * FD_STEP);
        assert!((analytic - fd).abs() / analytic.abs().max(1.0) < GRAD_REL);
    }
}
