//! AdamW with decoupled weight decay, a cosine learning-rate schedule
//! scaled by batch size, and micro-batch gradient accumulation.

use serde::{Deserialize, Serialize};

use super::{ModelError, ParamGrads, ParamSet};

/// Optimizer hyper-parameters; serialized into run configs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Micro-batches averaged per optimizer step.
    pub accumulate_steps: usize,
    /// Batch size used for learning-rate scaling.
    pub batch_size: usize,
    /// Reference batch size the base learning rate is quoted at.
    pub ref_batch: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 0.01,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            accumulate_steps: 2,
            batch_size: 28,
            ref_batch: 28,
        }
    }
}

/// Cosine schedule with batch-size scaling:
/// `lr(step) = base_lr * (batch/ref) * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(
    step: u64,
    total_steps: u64,
    base_lr: f64,
    batch_size: usize,
    ref_batch: usize,
) -> Result<f64, ModelError> {
    if total_steps == 0 {
        return Err(ModelError::EmptySchedule);
    }
    debug_assert!(step <= total_steps);
    let effective = base_lr * batch_size as f64 / ref_batch as f64;
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(effective * 0.5 * (1.0 + phase.cos()))
}

/// First/second moment accumulators plus the gradient-accumulation buffer.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    /// Completed optimizer steps (drives both bias correction and the
    /// schedule position).
    pub step: u64,
    /// Total optimizer steps the cosine schedule spans.
    pub total_steps: u64,
    pub(crate) grad_buffer: ParamSet,
    pub(crate) buffered: usize,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: OptimizerConfig, total_steps: u64) -> Self {
        OptimizerState {
            config,
            m: ParamSet::zeros_like(params),
            v: ParamSet::zeros_like(params),
            step: 0,
            total_steps,
            grad_buffer: ParamSet::zeros_like(params),
            buffered: 0,
        }
    }

    pub fn current_lr(&self) -> Result<f64, ModelError> {
        cosine_lr(
            self.step.min(self.total_steps),
            self.total_steps,
            self.config.base_lr,
            self.config.batch_size,
            self.config.ref_batch,
        )
    }

    pub fn buffered(&self) -> usize {
        self.buffered
    }
}

/// One AdamW update:
/// `theta -= lr * (mhat / (sqrt(vhat) + eps) + weight_decay * theta)`,
/// with bias-corrected moments and the schedule's current learning rate.
/// Non-finite gradients are rejected with the offending parameter's name.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &ParamGrads,
    state: &mut OptimizerState,
) -> Result<(), ModelError> {
    params.same_structure(grads)?;
    for (name, g) in grads.named() {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteGrad(name));
        }
    }
    let lr = state.current_lr()?;
    let (b1, b2) = (state.config.beta1, state.config.beta2);
    let eps = state.config.eps;
    let wd = state.config.weight_decay;
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);

    let grads_named = grads.named();
    let m_named = state.m.named_mut();
    // Iterate m and v separately to keep the borrow checker happy.
    for ((_, m), (_, g)) in m_named.into_iter().zip(grads_named.iter()) {
        for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
        }
    }
    let v_named = state.v.named_mut();
    for ((_, v), (_, g)) in v_named.into_iter().zip(grads_named.iter()) {
        for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
        }
    }
    let m_ro = state.m.named();
    let v_ro = state.v.named();
    for (((_, p), (_, m)), (_, v)) in params.named_mut().into_iter().zip(m_ro).zip(v_ro) {
        for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let mhat = mv / bc1;
            let vhat = vv / bc2;
            *pv -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pv);
        }
    }
    state.step += 1;
    Ok(())
}

/// Buffer a micro-batch gradient; once `accumulate_steps` micro-batches
/// have arrived, average them and take a single AdamW step. With equal
/// micro-batch sizes and mean-reduced losses this is equivalent (to f64
/// rounding) to one step on the concatenated batch. Returns whether a
/// step was taken.
pub fn accumulate_and_step(
    params: &mut ParamSet,
    grads: &ParamGrads,
    state: &mut OptimizerState,
) -> Result<bool, ModelError> {
    assert!(state.config.accumulate_steps >= 1);
    if state.config.accumulate_steps == 1 {
        adamw_step(params, grads, state)?;
        return Ok(true);
    }
    state.grad_buffer.add_scaled(grads, 1.0);
    state.buffered += 1;
    if state.buffered < state.config.accumulate_steps {
        return Ok(false);
    }
    let mut averaged = state.grad_buffer.clone();
    averaged.scale(1.0 / state.buffered as f64);
    state.grad_buffer.scale(0.0);
    state.buffered = 0;
    adamw_step(params, &averaged, state)?;
    Ok(true)
}
