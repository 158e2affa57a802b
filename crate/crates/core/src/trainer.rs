//! Shared training machinery: deterministic batch ordering, batch
//! gathering and augmentation, and the supervised step that both the pure
//! supervised trainer and the joint trainer's labeled branch run.
//!
//! Stream discipline: every source of randomness is a purpose-tagged child
//! of the run seed, indexed by epoch ("batch-order", "augment", "mixup",
//! plus the ssl-prefixed tags in the contrastive trainers), so trainers
//! that share a branch consume identical streams.

use thiserror::Error;

use crate::datagen::{augment, mixup, AugmentPolicy};
use crate::losses::{
    arcface, cross_entropy, label_smoothing_ce, ohem_filter, seesaw as seesaw_loss,
    soft_target_ce, LossChoice, LossError, SeesawState,
};
use crate::model::optim::{accumulate_and_step, OptimizerState};
use crate::model::{
    backward, backward_encoder, encode, forward, ModelError, ModelParams, ParamGrads, ParamSet,
};
use crate::numerics::{Matrix, SeededRng};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss '{0}' requires seesaw state")]
    MissingSeesawState(&'static str),
}

/// Shuffled index order for one epoch, drawn from the
/// `(seed, tag, epoch)` sub-stream.
pub fn epoch_order(root: &SeededRng, tag: &str, epoch: u64, pool: &[usize]) -> Vec<usize> {
    let mut order = pool.to_vec();
    let mut rng = root.child_indexed(tag, epoch);
    rng.shuffle(&mut order);
    order
}

pub fn chunk_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Gather rows by index into dense batch matrices.
pub fn gather_rows(
    features: &Matrix,
    meta: &Matrix,
    labels: Option<&[usize]>,
    idx: &[usize],
) -> (Matrix, Matrix, Vec<usize>) {
    let mut f = Matrix::zeros(idx.len(), features.cols());
    let mut m = Matrix::zeros(idx.len(), meta.cols());
    let mut l = Vec::with_capacity(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        f.row_mut(row).copy_from_slice(features.row(i));
        m.row_mut(row).copy_from_slice(meta.row(i));
        if let Some(labels) = labels {
            l.push(labels[i]);
        }
    }
    (f, m, l)
}

/// Augment every row with the shared policy, consuming the given stream in
/// row order.
pub fn augment_rows(features: &Matrix, policy: &AugmentPolicy, rng: &mut SeededRng) -> Matrix {
    if policy.is_identity() {
        return features.clone();
    }
    let mut out = Matrix::zeros(features.rows(), features.cols());
    for r in 0..features.rows() {
        let aug = augment(features.row(r), policy, rng);
        out.row_mut(r).copy_from_slice(&aug);
    }
    out
}

/// Mixup configuration for the soft-target loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixupSpec {
    pub alpha: f64,
}

/// Loss value and parameter gradients for one supervised batch.
#[derive(Debug)]
pub struct SupervisedOutcome {
    pub loss: f64,
    pub grads: ParamGrads,
}

/// One supervised forward/backward on an already-augmented batch.
///
/// Mixup (when requested) pairs the batch with a shuffled copy of itself
/// and mixes features, meta one-hots, and targets with one shared lambda;
/// it only applies to the soft-target loss.
#[allow(clippy::too_many_arguments)]
pub fn supervised_batch(
    params: &ModelParams,
    loss: &LossChoice,
    seesaw: Option<&mut SeesawState>,
    features: &Matrix,
    meta: &Matrix,
    labels: &[usize],
    mixup_spec: Option<MixupSpec>,
    mix_rng: &mut SeededRng,
) -> Result<SupervisedOutcome, TrainerError> {
    match loss {
        LossChoice::Arcface(cfg) => {
            let cache = encode(params, features, meta)?;
            let res = arcface(
                cache.embedding(),
                &params.set.classifier_weight,
                labels,
                cfg,
            )?;
            let mut grads = ParamSet::zeros_like(&params.set);
            grads.classifier_weight.add_scaled(&res.grad_weights, 1.0);
            backward_encoder(params, &cache, &res.grad_embeddings, &mut grads);
            Ok(SupervisedOutcome {
                loss: res.loss,
                grads,
            })
        }
        LossChoice::SoftTargetCe if mixup_spec.is_some() => {
            let spec = mixup_spec.expect("checked");
            let n = features.rows();
            let mut perm: Vec<usize> = (0..n).collect();
            mix_rng.shuffle(&mut perm);
            let (pf, pm, pl) = gather_rows(features, meta, Some(labels), &perm);
            let mixed = mixup(
                features,
                labels,
                &pf,
                &pl,
                params.config.num_classes,
                spec.alpha,
                mix_rng,
            );
            let mut mixed_meta = meta.clone();
            mixed_meta.scale(mixed.lambda);
            mixed_meta.add_scaled(&pm, 1.0 - mixed.lambda);
            let fwd = forward(params, &mixed.features, &mixed_meta)?;
            let res = soft_target_ce(&fwd.logits, &mixed.targets)?;
            let grads = backward(params, &fwd.cache, &res.grad_logits)?;
            Ok(SupervisedOutcome {
                loss: res.loss,
                grads,
            })
        }
        _ => {
            let fwd = forward(params, features, meta)?;
            let (loss_value, grad_logits) = match loss {
                LossChoice::SoftTargetCe => {
                    let r = cross_entropy(&fwd.logits, labels)?;
                    (r.loss, r.grad_logits)
                }
                LossChoice::LabelSmoothing { epsilon } => {
                    let r = label_smoothing_ce(&fwd.logits, labels, *epsilon)?;
                    (r.loss, r.grad_logits)
                }
                LossChoice::Seesaw(cfg) => {
                    let state =
                        seesaw.ok_or(TrainerError::MissingSeesawState("seesaw"))?;
                    let r = seesaw_loss(&fwd.logits, labels, state, cfg)?;
                    (r.loss, r.grad_logits)
                }
                LossChoice::OhemCe { keep_fraction } => {
                    let r = cross_entropy(&fwd.logits, labels)?;
                    let sel = ohem_filter(&r.per_sample, *keep_fraction)?;
                    let n = labels.len();
                    let k = sel.indices.len();
                    // Kept rows rescale from 1/n to 1/k; dropped rows zero.
                    let mut g = Matrix::zeros(n, params.config.num_classes);
                    for &i in &sel.indices {
                        for (dst, src) in
                            g.row_mut(i).iter_mut().zip(r.grad_logits.row(i))
                        {
                            *dst = src * n as f64 / k as f64;
                        }
                    }
                    (sel.mean, g)
                }
                LossChoice::Arcface(_) => unreachable!("handled above"),
            };
            let grads = backward(params, &fwd.cache, &grad_logits)?;
            Ok(SupervisedOutcome {
                loss: loss_value,
                grads,
            })
        }
    }
}

/// One supervised epoch over the training indices; returns the mean batch
/// loss. `freeze_encoder` zeroes encoder and meta-path gradients (used
/// when fine-tuning only the classifier after a self-supervised phase).
#[allow(clippy::too_many_arguments)]
pub fn supervised_epoch(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    loss: &LossChoice,
    mut seesaw: Option<&mut SeesawState>,
    features: &Matrix,
    meta: &Matrix,
    labels: &[usize],
    train_idx: &[usize],
    policy: &AugmentPolicy,
    mixup_spec: Option<MixupSpec>,
    freeze_encoder: bool,
    root_rng: &SeededRng,
    epoch: u64,
    batch_size: usize,
) -> Result<f64, TrainerError> {
    assert!(!train_idx.is_empty(), "empty training pool");
    let order = epoch_order(root_rng, "batch-order", epoch, train_idx);
    let mut aug = root_rng.child_indexed("augment", epoch);
    let mut mix = root_rng.child_indexed("mixup", epoch);
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in chunk_batches(&order, batch_size) {
        let (raw, bmeta, blabels) = gather_rows(features, meta, Some(labels), &batch);
        let x = augment_rows(&raw, policy, &mut aug);
        let mut out = supervised_batch(
            params,
            loss,
            seesaw.as_deref_mut(),
            &x,
            &bmeta,
            &blabels,
            mixup_spec,
            &mut mix,
        )?;
        if freeze_encoder {
            out.grads.meta_embed.scale(0.0);
            for layer in &mut out.grads.encoder {
                layer.weight.scale(0.0);
                layer.bias.scale(0.0);
            }
        }
        total += out.loss;
        count += 1;
        accumulate_and_step(&mut params.set, &out.grads, opt)?;
    }
    Ok(total / count as f64)
}

/// Inference logits for a feature/meta matrix pair.
pub fn predict_logits(
    params: &ModelParams,
    features: &Matrix,
    meta: &Matrix,
) -> Result<Matrix, ModelError> {
    Ok(forward(params, features, meta)?.logits)
}

/// Optimizer steps one epoch will take (used to size cosine schedules).
pub fn steps_per_epoch(pool: usize, batch_size: usize, accumulate_steps: usize) -> u64 {
    let batches = pool.div_ceil(batch_size);
    (batches.div_ceil(accumulate_steps)) as u64
}
