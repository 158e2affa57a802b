//! Run orchestration: dataset generation, the chosen training pipeline,
//! the pseudo-label continuation, final evaluation, and persistence.
//!
//! Every stochastic stream in a run is a purpose-tagged child of the run
//! seed, so a run is a pure function of its config. Checkpoints capture
//! parameters, optimizer state, seesaw counts, and the phase cursors;
//! resuming at an epoch boundary reproduces the uninterrupted run bit for
//! bit. A resumed run's manifest lists the epochs that invocation ran
//! (epoch indices are absolute, so the stopped and resumed manifests
//! concatenate into the full history).

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{RunConfig, TrainerChoice};
use super::metrics::{head_tail_f1, macro_f1, F1Report};
use super::predictions::PredictionSet;
use super::pseudo::pseudo_label_select;
use super::tta::tta_predict;
use super::HarnessError;
use crate::contrastive::{moco_pretrain_epoch, simclr_joint_epoch};
use crate::datagen::{generate, Dataset, Split};
use crate::losses::{LossChoice, SeesawState};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::model::optim::{OptimizerConfig, OptimizerState};
use crate::model::{ModelConfig, ModelParams, ParamSet};
use crate::numerics::{Matrix, SeededRng};
use crate::trainer::{
    gather_rows, predict_logits, steps_per_epoch, supervised_epoch, MixupSpec,
};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainEpochMetrics {
    pub epoch: usize,
    /// Supervised component (joint trainer only).
    pub supervised_loss: Option<f64>,
    pub self_supervised_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PseudoStage {
    pub fraction: f64,
    pub added: usize,
    pub epochs: usize,
    pub per_epoch: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FinalMetrics {
    /// Which split the final numbers come from ("test_unlabeled", or
    /// "val" when the config has no unlabeled pool).
    pub split: String,
    pub macro_f1: f64,
    pub head_f1: Option<f64>,
    pub tail_f1: Option<f64>,
    pub per_class_f1: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub format_version: u32,
    pub code_version: String,
    pub config: RunConfig,
    pub dataset_fingerprint: String,
    pub class_counts: Vec<usize>,
    pub train_class_counts: Vec<usize>,
    pub pretrain: Vec<PretrainEpochMetrics>,
    pub per_epoch: Vec<EpochMetrics>,
    pub pseudo: Option<PseudoStage>,
    pub final_metrics: FinalMetrics,
    pub wall_clock_secs: f64,
    pub incomplete: bool,
}

impl RunManifest {
    /// The deterministic metrics block (everything except wall-clock),
    /// used by the determinism checks.
    pub fn metrics_json(&self) -> String {
        #[derive(Serialize)]
        struct Block<'a> {
            pretrain: &'a [PretrainEpochMetrics],
            per_epoch: &'a [EpochMetrics],
            pseudo: &'a Option<PseudoStage>,
            final_metrics: &'a FinalMetrics,
        }
        serde_json::to_string(&Block {
            pretrain: &self.pretrain,
            per_epoch: &self.per_epoch,
            pseudo: &self.pseudo,
            final_metrics: &self.final_metrics,
        })
        .expect("metrics serialize")
    }

    /// Atomic write: temp file in the target directory, then rename.
    pub fn write_file(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| HarnessError::Stage {
            stage: "persist",
            message: e.to_string(),
        })?;
        std::fs::rename(&tmp, path).map_err(|e| HarnessError::Stage {
            stage: "persist",
            message: e.to_string(),
        })
    }

    pub fn read_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Stage {
            stage: "report",
            message: format!("{}: {e}", path.display()),
        })?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Stage {
            stage: "report",
            message: e.to_string(),
        })
    }
}

/// Optional knobs for [`run_with_options`]; the plain [`run`] uses the
/// defaults.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Resume from a checkpoint written by an earlier (possibly stopped)
    /// run of the same config.
    pub resume_from: Option<PathBuf>,
    /// Stop after this many main-phase epochs, writing the checkpoint and
    /// an incomplete manifest.
    pub stop_after_main_epochs: Option<usize>,
}

pub fn run(config: &RunConfig) -> Result<RunManifest, HarnessError> {
    run_with_options(config, &RunOptions::default())
}

pub fn run_with_options(
    config: &RunConfig,
    options: &RunOptions,
) -> Result<RunManifest, HarnessError> {
    let result = run_inner(config, options);
    if let Err(err) = &result {
        // Mark partial output rather than leaving a directory that looks
        // complete.
        if let Some(dir) = &config.output_dir {
            let _ = std::fs::create_dir_all(dir);
            let note = serde_json::json!({
                "incomplete": true,
                "error": err.to_string(),
            });
            let _ = std::fs::write(
                dir.join("manifest.incomplete.json"),
                serde_json::to_string_pretty(&note).expect("serializes"),
            );
        }
    }
    result
}

/// Phase cursors tracked through a run and stored in checkpoints.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Cursors {
    pretrain_done: u64,
    main_done: u64,
    pseudo_done: u64,
}

impl Cursors {
    /// 0 = pretrain, 1 = main, 2 = pseudo.
    fn current_phase(&self, cfg: &RunConfig) -> u64 {
        if self.pretrain_done < cfg.pretrain_epochs as u64 {
            0
        } else if self.main_done < cfg.epochs as u64 {
            1
        } else {
            2
        }
    }
}

struct RunState {
    params: ModelParams,
    key: Option<ParamSet>,
    opt: Option<OptimizerState>,
    opt_phase: u64,
    seesaw: Option<SeesawState>,
    cursors: Cursors,
    /// (sample_id, pseudo label) pairs, fixed once the pseudo phase
    /// starts so a resumed run reuses the original selection.
    pseudo_additions: Option<Vec<(usize, usize)>>,
}

fn stage<E: std::fmt::Display>(name: &'static str) -> impl FnOnce(E) -> HarnessError {
    move |e| HarnessError::Stage {
        stage: name,
        message: e.to_string(),
    }
}

fn run_inner(config: &RunConfig, options: &RunOptions) -> Result<RunManifest, HarnessError> {
    config.validate()?;
    let t0 = Instant::now();
    let dataset = generate(&config.dataset).map_err(stage("generate"))?;
    let root = SeededRng::new(config.seed);

    let model_cfg = model_config(config, &dataset);
    let mut state = RunState {
        params: ModelParams::init(&model_cfg, &mut root.child("init")),
        key: None,
        opt: None,
        opt_phase: 0,
        seesaw: config
            .loss
            .needs_seesaw_state()
            .then(|| SeesawState::new(dataset.num_classes())),
        cursors: Cursors::default(),
        pseudo_additions: None,
    };
    if let Some(path) = &options.resume_from {
        restore_state(config, &mut state, path)?;
    }

    // Meta channel: a disabled channel feeds all-zero one-hots, which is
    // exactly the model's "no meta" input.
    let meta_input = if config.meta_enabled {
        dataset.meta.clone()
    } else {
        Matrix::zeros(dataset.len(), dataset.config.num_meta_categories)
    };

    let train_idx = dataset.indices_of(Split::Train);
    let val_idx = dataset.indices_of(Split::Val);
    let test_idx = dataset.indices_of(Split::TestUnlabeled);

    let mut pretrain_metrics: Vec<PretrainEpochMetrics> = Vec::new();
    let mut per_epoch: Vec<EpochMetrics> = Vec::new();

    // Self-supervised phase.
    if state.cursors.pretrain_done < config.pretrain_epochs as u64 {
        run_pretrain_phase(
            config,
            &dataset,
            &meta_input,
            &train_idx,
            &test_idx,
            &root,
            &mut state,
            &mut pretrain_metrics,
        )?;
    }

    // Main supervised phase.
    let mixup_spec = config.mixup_alpha.map(|alpha| MixupSpec { alpha });
    let freeze = config.freeze_encoder_finetune
        && !matches!(config.trainer, TrainerChoice::Supervised);
    if state.cursors.main_done < config.epochs as u64 {
        ensure_phase_optimizer(config, &mut state, 1, config.epochs, train_idx.len());
        for epoch in state.cursors.main_done..config.epochs as u64 {
            let opt = state.opt.as_mut().expect("phase optimizer");
            let train_loss = supervised_epoch(
                &mut state.params,
                opt,
                &config.loss,
                state.seesaw.as_mut(),
                &dataset.features,
                &meta_input,
                &dataset.labels,
                &train_idx,
                &config.augment,
                mixup_spec,
                freeze,
                &root,
                epoch,
                config.batch_size,
            )
            .map_err(stage("train"))?;
            let val_macro_f1 =
                eval_plain(&state.params, &dataset, &meta_input, &val_idx)?.map(|r| r.macro_f1);
            per_epoch.push(EpochMetrics {
                epoch: epoch as usize,
                train_loss,
                val_macro_f1,
            });
            state.cursors.main_done = epoch + 1;
            if options.stop_after_main_epochs == Some((epoch + 1) as usize)
                && state.cursors.main_done < config.epochs as u64
            {
                return finish_stopped(config, &dataset, state, pretrain_metrics, per_epoch, t0);
            }
        }
    }

    // Pseudo-label continuation.
    let mut pseudo_stage = None;
    if config.pseudo_epochs > 0 {
        pseudo_stage = Some(run_pseudo_phase(
            config,
            &dataset,
            &meta_input,
            &train_idx,
            &val_idx,
            &test_idx,
            &root,
            &mut state,
        )?);
    }

    // Final evaluation.
    let (final_metrics, predictions) =
        final_eval(config, &dataset, &meta_input, &val_idx, &test_idx, &state.params, &root)?;

    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        dataset_fingerprint: dataset.fingerprint(),
        class_counts: dataset.class_counts.clone(),
        train_class_counts: train_counts(&dataset),
        pretrain: pretrain_metrics,
        per_epoch,
        pseudo: pseudo_stage,
        final_metrics,
        wall_clock_secs: t0.elapsed().as_secs_f64(),
        incomplete: false,
    };
    persist_outputs(config, &state, &manifest, Some(&predictions))?;
    Ok(manifest)
}

fn model_config(config: &RunConfig, dataset: &Dataset) -> ModelConfig {
    let (arcface_mode, arcface_scale) = match &config.loss {
        LossChoice::Arcface(cfg) => (true, cfg.scale_s),
        _ => (false, 1.0),
    };
    ModelConfig {
        feature_dim: dataset.config.feature_dim,
        num_meta: dataset.config.num_meta_categories,
        meta_dim: config.meta_dim,
        hidden: config.hidden.clone(),
        embed_dim: config.embed_dim,
        num_classes: dataset.num_classes(),
        arcface_mode,
        arcface_scale,
        proj_hidden: config.proj_hidden,
        proj_dim: config.proj_dim,
        pred_hidden: config.pred_hidden,
    }
}

fn optimizer_config(config: &RunConfig) -> OptimizerConfig {
    OptimizerConfig {
        base_lr: config.base_lr,
        weight_decay: config.weight_decay + config.loss.weight_decay(),
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        accumulate_steps: config.accumulate_steps,
        batch_size: config.batch_size,
        ref_batch: config.ref_batch,
    }
}

/// Install the optimizer for `phase` unless a resumed one is already in
/// place.
fn ensure_phase_optimizer(
    config: &RunConfig,
    state: &mut RunState,
    phase: u64,
    epochs: usize,
    pool: usize,
) {
    if state.opt.is_some() && state.opt_phase == phase {
        return;
    }
    let total =
        epochs as u64 * steps_per_epoch(pool, config.batch_size, config.accumulate_steps);
    state.opt = Some(OptimizerState::new(
        &state.params.set,
        optimizer_config(config),
        total.max(1),
    ));
    state.opt_phase = phase;
}

#[allow(clippy::too_many_arguments)]
fn run_pretrain_phase(
    config: &RunConfig,
    dataset: &Dataset,
    meta_input: &Matrix,
    train_idx: &[usize],
    test_idx: &[usize],
    root: &SeededRng,
    state: &mut RunState,
    metrics: &mut Vec<PretrainEpochMetrics>,
) -> Result<(), HarnessError> {
    match config.trainer {
        TrainerChoice::Supervised => Ok(()),
        TrainerChoice::MocoThenFinetune => {
            if test_idx.is_empty() {
                return Err(HarnessError::Stage {
                    stage: "pretrain",
                    message: "momentum pretraining needs an unlabeled pool".into(),
                });
            }
            ensure_phase_optimizer(config, state, 0, config.pretrain_epochs, test_idx.len());
            if state.key.is_none() {
                state.key = Some(state.params.set.clone());
            }
            for epoch in state.cursors.pretrain_done..config.pretrain_epochs as u64 {
                let opt = state.opt.as_mut().expect("phase optimizer");
                let key = state.key.as_mut().expect("momentum copy");
                let stats = moco_pretrain_epoch(
                    &mut state.params,
                    key,
                    opt,
                    &dataset.features,
                    meta_input,
                    test_idx,
                    &config.augment,
                    &config.contrastive,
                    root,
                    epoch,
                    config.batch_size,
                )
                .map_err(stage("pretrain"))?;
                metrics.push(PretrainEpochMetrics {
                    epoch: epoch as usize,
                    supervised_loss: None,
                    self_supervised_loss: stats.mean_loss,
                });
                state.cursors.pretrain_done = epoch + 1;
            }
            Ok(())
        }
        TrainerChoice::SimclrJoint => {
            ensure_phase_optimizer(config, state, 0, config.pretrain_epochs, train_idx.len());
            for epoch in state.cursors.pretrain_done..config.pretrain_epochs as u64 {
                let opt = state.opt.as_mut().expect("phase optimizer");
                let stats = simclr_joint_epoch(
                    &mut state.params,
                    opt,
                    &config.loss,
                    state.seesaw.as_mut(),
                    &dataset.features,
                    meta_input,
                    &dataset.labels,
                    train_idx,
                    test_idx,
                    &config.augment,
                    config.mixup_alpha.map(|alpha| MixupSpec { alpha }),
                    &config.contrastive,
                    &config.joint,
                    root,
                    epoch,
                    config.batch_size,
                )
                .map_err(stage("pretrain"))?;
                metrics.push(PretrainEpochMetrics {
                    epoch: epoch as usize,
                    supervised_loss: Some(stats.mean_supervised),
                    self_supervised_loss: stats.mean_self_supervised,
                });
                state.cursors.pretrain_done = epoch + 1;
            }
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_pseudo_phase(
    config: &RunConfig,
    dataset: &Dataset,
    meta_input: &Matrix,
    train_idx: &[usize],
    val_idx: &[usize],
    test_idx: &[usize],
    root: &SeededRng,
    state: &mut RunState,
) -> Result<PseudoStage, HarnessError> {
    // Selection uses plain (non-TTA) logits: the ranking rule is the raw
    // max logit. The selection is made once; resumed runs reuse it.
    if state.pseudo_additions.is_none() {
        let additions = if config.pseudo_label_fraction > 0.0 && !test_idx.is_empty() {
            let (f, m, _) = gather_rows(&dataset.features, meta_input, None, test_idx);
            let logits = predict_logits(&state.params, &f, &m).map_err(stage("pseudo"))?;
            let preds = PredictionSet::from_logits("pseudo", test_idx.to_vec(), logits);
            pseudo_label_select(&preds, config.pseudo_label_fraction)?
                .into_iter()
                .map(|p| (p.sample_id, p.label))
                .collect()
        } else {
            Vec::new()
        };
        state.pseudo_additions = Some(additions);
    }
    let additions = state.pseudo_additions.clone().expect("just set");

    let mut labels = dataset.labels.clone();
    let mut extended: Vec<usize> = train_idx.to_vec();
    for &(sample_id, label) in &additions {
        labels[sample_id] = label;
        extended.push(sample_id);
    }

    ensure_phase_optimizer(config, state, 2, config.pseudo_epochs, extended.len());
    let mixup_spec = config.mixup_alpha.map(|alpha| MixupSpec { alpha });
    let mut stage_metrics = Vec::new();
    for e in state.cursors.pseudo_done..config.pseudo_epochs as u64 {
        let opt = state.opt.as_mut().expect("phase optimizer");
        // Epoch streams continue past the main phase so the continuation
        // is deterministic but distinct from the main epochs.
        let epoch_index = config.epochs as u64 + e;
        let train_loss = supervised_epoch(
            &mut state.params,
            opt,
            &config.loss,
            state.seesaw.as_mut(),
            &dataset.features,
            meta_input,
            &labels,
            &extended,
            &config.augment,
            mixup_spec,
            false,
            root,
            epoch_index,
            config.batch_size,
        )
        .map_err(stage("pseudo"))?;
        let val_macro_f1 =
            eval_plain(&state.params, dataset, meta_input, val_idx)?.map(|r| r.macro_f1);
        stage_metrics.push(EpochMetrics {
            epoch: e as usize,
            train_loss,
            val_macro_f1,
        });
        state.cursors.pseudo_done = e + 1;
    }
    Ok(PseudoStage {
        fraction: config.pseudo_label_fraction,
        added: additions.len(),
        epochs: config.pseudo_epochs,
        per_epoch: stage_metrics,
    })
}

/// Plain (no TTA) evaluation of a split; `None` when the split is empty.
fn eval_plain(
    params: &ModelParams,
    dataset: &Dataset,
    meta_input: &Matrix,
    idx: &[usize],
) -> Result<Option<F1Report>, HarnessError> {
    if idx.is_empty() {
        return Ok(None);
    }
    let (f, m, truth) = gather_rows(&dataset.features, meta_input, Some(&dataset.labels), idx);
    let logits = predict_logits(params, &f, &m).map_err(stage("eval"))?;
    let preds = PredictionSet::from_logits("eval", idx.to_vec(), logits);
    Ok(Some(macro_f1(
        &preds.predicted,
        &truth,
        dataset.num_classes(),
    )?))
}

fn train_counts(dataset: &Dataset) -> Vec<usize> {
    let mut counts = vec![0usize; dataset.num_classes()];
    for i in 0..dataset.len() {
        if dataset.split[i] == Split::Train {
            counts[dataset.labels[i]] += 1;
        }
    }
    counts
}

fn final_eval(
    config: &RunConfig,
    dataset: &Dataset,
    meta_input: &Matrix,
    val_idx: &[usize],
    test_idx: &[usize],
    params: &ModelParams,
    root: &SeededRng,
) -> Result<(FinalMetrics, PredictionSet), HarnessError> {
    let (idx, split_name) = if !test_idx.is_empty() {
        (test_idx, "test_unlabeled")
    } else {
        (val_idx, "val")
    };
    if idx.is_empty() {
        return Err(HarnessError::EmptyEvaluation);
    }
    let preds = if config.tta.is_plain() {
        let (f, m, _) = gather_rows(&dataset.features, meta_input, None, idx);
        let logits = predict_logits(params, &f, &m).map_err(stage("eval"))?;
        PredictionSet::from_logits(config.model_id(), idx.to_vec(), logits)
    } else {
        // Averaged per-view probabilities stand in for logits; argmax is
        // what downstream metrics consume.
        let mut probs = Matrix::zeros(idx.len(), dataset.num_classes());
        for (row, &i) in idx.iter().enumerate() {
            let p = tta_predict(
                params,
                dataset.features.row(i),
                meta_input.row(i),
                &config.tta,
                root,
                i,
            )?;
            probs.row_mut(row).copy_from_slice(&p);
        }
        PredictionSet::from_logits(config.model_id(), idx.to_vec(), probs)
    };
    let truth: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
    let report = macro_f1(&preds.predicted, &truth, dataset.num_classes())?;
    let (head, tail) = head_tail_f1(&report, &train_counts(dataset));
    Ok((
        FinalMetrics {
            split: split_name.to_string(),
            macro_f1: report.macro_f1,
            head_f1: head,
            tail_f1: tail,
            per_class_f1: report.per_class,
        },
        preds,
    ))
}

impl RunConfig {
    /// Identifier used for prediction files and report rows.
    pub fn model_id(&self) -> String {
        format!(
            "{}_{}_s{}",
            self.loss.name(),
            self.trainer.name(),
            self.seed
        )
    }
}

/// Rebuild the trained model stored in a checkpoint, shaped for the given
/// dataset. Returns the run config echoed into the checkpoint alongside
/// the parameters.
pub fn load_model_from_checkpoint(
    path: &Path,
    dataset: &Dataset,
) -> Result<(RunConfig, ModelParams), HarnessError> {
    let ckpt = load_checkpoint(path).map_err(stage("load"))?;
    let cfg: RunConfig = serde_json::from_str(&ckpt.config_json).map_err(stage("load"))?;
    let model_cfg = model_config(&cfg, dataset);
    let mut params = ModelParams::zeros(&model_cfg);
    set_from_arrays(&mut params.set, &ckpt, "")?;
    Ok((cfg, params))
}

/// Evaluate a model on one split of a dataset, with optional test-time
/// augmentation. Returns the predictions and the F1 report against the
/// dataset's (possibly hidden) labels.
pub fn evaluate_split(
    run_cfg: &RunConfig,
    params: &ModelParams,
    dataset: &Dataset,
    split: Split,
    tta: Option<&super::tta::TtaPolicy>,
) -> Result<(PredictionSet, F1Report), HarnessError> {
    let idx = dataset.indices_of(split);
    if idx.is_empty() {
        return Err(HarnessError::EmptyEvaluation);
    }
    let meta_input = if run_cfg.meta_enabled {
        dataset.meta.clone()
    } else {
        Matrix::zeros(dataset.len(), dataset.config.num_meta_categories)
    };
    let root = SeededRng::new(run_cfg.seed);
    let preds = match tta {
        Some(policy) if !policy.is_plain() => {
            let mut probs = Matrix::zeros(idx.len(), dataset.num_classes());
            for (row, &i) in idx.iter().enumerate() {
                let p = tta_predict(
                    params,
                    dataset.features.row(i),
                    meta_input.row(i),
                    policy,
                    &root,
                    i,
                )?;
                probs.row_mut(row).copy_from_slice(&p);
            }
            PredictionSet::from_logits(run_cfg.model_id(), idx.clone(), probs)
        }
        _ => {
            let (f, m, _) = gather_rows(&dataset.features, &meta_input, None, &idx);
            let logits = predict_logits(params, &f, &m).map_err(stage("eval"))?;
            PredictionSet::from_logits(run_cfg.model_id(), idx.clone(), logits)
        }
    };
    let truth: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
    let report = macro_f1(&preds.predicted, &truth, dataset.num_classes())?;
    Ok((preds, report))
}

fn finish_stopped(
    config: &RunConfig,
    dataset: &Dataset,
    state: RunState,
    pretrain: Vec<PretrainEpochMetrics>,
    per_epoch: Vec<EpochMetrics>,
    t0: Instant,
) -> Result<RunManifest, HarnessError> {
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        dataset_fingerprint: dataset.fingerprint(),
        class_counts: dataset.class_counts.clone(),
        train_class_counts: train_counts(dataset),
        pretrain,
        per_epoch,
        pseudo: None,
        final_metrics: FinalMetrics {
            split: "none".into(),
            macro_f1: f64::NAN,
            head_f1: None,
            tail_f1: None,
            per_class_f1: Vec::new(),
        },
        wall_clock_secs: t0.elapsed().as_secs_f64(),
        incomplete: true,
    };
    persist_outputs(config, &state, &manifest, None)?;
    Ok(manifest)
}

fn persist_outputs(
    config: &RunConfig,
    state: &RunState,
    manifest: &RunManifest,
    predictions: Option<&PredictionSet>,
) -> Result<(), HarnessError> {
    let Some(dir) = &config.output_dir else {
        return Ok(());
    };
    std::fs::create_dir_all(dir).map_err(stage("persist"))?;
    let ckpt = build_checkpoint(config, state);
    save_checkpoint(&dir.join("model.ckpt"), &ckpt).map_err(stage("persist"))?;
    if let Some(preds) = predictions {
        preds.write_csv(&dir.join("predictions.csv"))?;
    }
    manifest.write_file(&dir.join(if manifest.incomplete {
        "manifest.incomplete.json"
    } else {
        "manifest.json"
    }))?;
    Ok(())
}

fn arrays_from_set(set: &ParamSet, prefix: &str, out: &mut Vec<(String, Matrix)>) {
    for (name, m) in set.named() {
        out.push((format!("{prefix}{name}"), m.clone()));
    }
}

fn set_from_arrays(
    target: &mut ParamSet,
    ckpt: &Checkpoint,
    prefix: &str,
) -> Result<(), HarnessError> {
    for (name, m) in target.named_mut() {
        let full = format!("{prefix}{name}");
        let stored = ckpt.array(&full).ok_or_else(|| HarnessError::Stage {
            stage: "resume",
            message: format!("checkpoint is missing array '{full}'"),
        })?;
        if stored.rows() != m.rows() || stored.cols() != m.cols() {
            return Err(HarnessError::Stage {
                stage: "resume",
                message: format!("array '{full}' has mismatched shape"),
            });
        }
        m.data_mut().copy_from_slice(stored.data());
    }
    Ok(())
}

fn build_checkpoint(config: &RunConfig, state: &RunState) -> Checkpoint {
    let mut arrays = Vec::new();
    arrays_from_set(&state.params.set, "", &mut arrays);
    if let Some(key) = &state.key {
        arrays_from_set(key, "key.", &mut arrays);
    }
    if let Some(opt) = &state.opt {
        arrays_from_set(&opt.m, "opt.m.", &mut arrays);
        arrays_from_set(&opt.v, "opt.v.", &mut arrays);
        arrays_from_set(&opt.grad_buffer, "opt.buf.", &mut arrays);
    }
    if let Some(seesaw) = &state.seesaw {
        let counts: Vec<f64> = seesaw.counts().iter().map(|&c| c as f64).collect();
        arrays.push((
            "seesaw.counts".to_string(),
            Matrix::from_vec(1, counts.len(), counts).expect("counts finite"),
        ));
    }
    if let Some(additions) = &state.pseudo_additions {
        let mut data = Vec::with_capacity(additions.len() * 2);
        for &(id, label) in additions {
            data.push(id as f64);
            data.push(label as f64);
        }
        arrays.push((
            "pseudo.additions".to_string(),
            Matrix::from_vec(additions.len(), 2, data).expect("ids finite"),
        ));
    }
    let root = SeededRng::new(config.seed);
    let (seed, rng_state) = root.to_parts();
    let mut scalars = vec![
        ("phase.pretrain_done".to_string(), state.cursors.pretrain_done),
        ("phase.main_done".to_string(), state.cursors.main_done),
        ("phase.pseudo_done".to_string(), state.cursors.pseudo_done),
        ("rng.seed".to_string(), seed),
        ("rng.state".to_string(), rng_state),
        ("opt.phase".to_string(), state.opt_phase),
        ("has.key".to_string(), state.key.is_some() as u64),
        ("has.opt".to_string(), state.opt.is_some() as u64),
        (
            "has.pseudo".to_string(),
            state.pseudo_additions.is_some() as u64,
        ),
    ];
    if let Some(opt) = &state.opt {
        scalars.push(("opt.step".to_string(), opt.step));
        scalars.push(("opt.total_steps".to_string(), opt.total_steps));
        scalars.push(("opt.buffered".to_string(), opt.buffered as u64));
    }
    Checkpoint {
        config_json: serde_json::to_string(config).expect("config serializes"),
        arrays,
        scalars,
    }
}

fn restore_state(
    config: &RunConfig,
    state: &mut RunState,
    path: &Path,
) -> Result<(), HarnessError> {
    let ckpt = load_checkpoint(path).map_err(stage("resume"))?;
    let stored: RunConfig =
        serde_json::from_str(&ckpt.config_json).map_err(stage("resume"))?;
    // The echoed config must describe the same run (output location may
    // differ between the stopped and resumed invocations).
    let mut normalized = stored.clone();
    normalized.output_dir = config.output_dir.clone();
    if &normalized != config {
        return Err(HarnessError::Stage {
            stage: "resume",
            message: "checkpoint config does not match the requested run".into(),
        });
    }

    set_from_arrays(&mut state.params.set, &ckpt, "")?;
    state.cursors = Cursors {
        pretrain_done: ckpt.scalar("phase.pretrain_done").unwrap_or(0),
        main_done: ckpt.scalar("phase.main_done").unwrap_or(0),
        pseudo_done: ckpt.scalar("phase.pseudo_done").unwrap_or(0),
    };
    if ckpt.scalar("has.key") == Some(1) {
        let mut key = ParamSet::zeros_like(&state.params.set);
        set_from_arrays(&mut key, &ckpt, "key.")?;
        state.key = Some(key);
    }
    if let Some(seesaw) = &mut state.seesaw {
        if let Some(counts) = ckpt.array("seesaw.counts") {
            *seesaw = SeesawState::from_counts(
                counts.data().iter().map(|&v| v as u64).collect(),
            );
        }
    }
    if ckpt.scalar("has.pseudo") == Some(1) {
        let stored = ckpt.array("pseudo.additions").ok_or(HarnessError::Stage {
            stage: "resume",
            message: "checkpoint is missing the pseudo selection".into(),
        })?;
        let additions = (0..stored.rows())
            .map(|r| (stored.get(r, 0) as usize, stored.get(r, 1) as usize))
            .collect();
        state.pseudo_additions = Some(additions);
    }
    // Restore the in-progress phase optimizer only if it belongs to the
    // phase the cursors put us in; a phase boundary starts fresh.
    if ckpt.scalar("has.opt") == Some(1) {
        let opt_phase = ckpt.scalar("opt.phase").unwrap_or(0);
        if opt_phase == state.cursors.current_phase(config) {
            let total = ckpt.scalar("opt.total_steps").unwrap_or(1);
            let mut opt =
                OptimizerState::new(&state.params.set, optimizer_config(config), total);
            opt.step = ckpt.scalar("opt.step").unwrap_or(0);
            opt.buffered = ckpt.scalar("opt.buffered").unwrap_or(0) as usize;
            set_from_arrays(&mut opt.m, &ckpt, "opt.m.")?;
            set_from_arrays(&mut opt.v, &ckpt, "opt.v.")?;
            set_from_arrays(&mut opt.grad_buffer, &ckpt, "opt.buf.")?;
            state.opt = Some(opt);
            state.opt_phase = opt_phase;
        }
    }
    Ok(())
}
