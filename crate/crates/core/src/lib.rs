//! Desk-scale training laboratory for fine-grained, long-tailed
//! classification.
//!
//! The crate generates synthetic fine-grained datasets with a geometric
//! long-tail class schedule and one-hot meta attributes, trains a small
//! feed-forward encoder against a family of supervised losses (soft-target
//! cross entropy, label smoothing, additive angular margin, seesaw, hard
//! example mining), supports momentum-encoder and joint contrastive
//! pretraining on the unlabeled split, and evaluates with pseudo-labeling,
//! test-time augmentation, and max-logit ensembling. All gradients are
//! written by hand and verified against central finite differences.
//!
//! Module map:
//!
//! * [`numerics`] - dense matrices, stable reductions, the documented RNG.
//! * [`datagen`] - synthetic dataset generation, augmentation, mixup.
//! * [`losses`] - supervised losses with analytic gradients.
//! * [`contrastive`] - InfoNCE-family losses and the two SSL trainers.
//! * [`model`] - encoder/heads, manual backprop, AdamW, checkpoints.
//! * [`harness`] - run orchestration, metrics, persistence, reports.
//! * [`gradcheck`] - the finite-difference verification suite.

pub mod contrastive;
pub mod datagen;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod tolerances;
pub mod trainer;
