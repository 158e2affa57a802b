//! Run configuration: one serializable tree that pins every knob of a
//! training run. The config is echoed verbatim into the manifest, so runs
//! replay from their manifest alone.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use super::tta::TtaPolicy;
use super::HarnessError;
use crate::contrastive::{ContrastiveConfig, JointConfig};
use crate::datagen::{AugmentPolicy, DatasetConfig};
use crate::losses::LossChoice;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainerChoice {
    #[default]
    Supervised,
    MocoThenFinetune,
    SimclrJoint,
}

impl TrainerChoice {
    pub fn name(&self) -> &'static str {
        match self {
            TrainerChoice::Supervised => "supervised",
            TrainerChoice::MocoThenFinetune => "moco_then_finetune",
            TrainerChoice::SimclrJoint => "simclr_joint",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub loss: LossChoice,
    pub trainer: TrainerChoice,
    /// Supervised (or fine-tune) epochs.
    pub epochs: usize,
    /// Self-supervised phase epochs (momentum pretrain or joint training).
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub accumulate_steps: usize,
    pub seed: u64,
    /// Fraction of the unlabeled pool promoted to pseudo-labels after the
    /// main phase (0 disables selection; the continuation epochs still run
    /// when `pseudo_epochs > 0` so baselines stay comparable).
    pub pseudo_label_fraction: f64,
    pub pseudo_epochs: usize,
    pub tta: TtaPolicy,
    /// Where to persist the manifest, checkpoint, and predictions; `None`
    /// keeps the run in memory.
    pub output_dir: Option<PathBuf>,

    // Model shape.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub meta_enabled: bool,
    pub meta_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,

    // Optimization.
    pub base_lr: f64,
    pub ref_batch: usize,
    pub weight_decay: f64,
    pub augment: AugmentPolicy,
    /// Mixup alpha for the soft-target loss; `None` disables mixup.
    pub mixup_alpha: Option<f64>,

    pub contrastive: ContrastiveConfig,
    pub joint: JointConfig,
    /// Freeze the encoder and meta path during fine-tuning after a
    /// self-supervised phase (gradients zeroed; decay still applies if
    /// nonzero).
    pub freeze_encoder_finetune: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            loss: LossChoice::SoftTargetCe,
            trainer: TrainerChoice::Supervised,
            epochs: 30,
            pretrain_epochs: 0,
            batch_size: 16,
            accumulate_steps: 2,
            seed: 1,
            pseudo_label_fraction: 0.0,
            pseudo_epochs: 0,
            tta: TtaPolicy::disabled(),
            output_dir: None,
            hidden: vec![64, 64],
            embed_dim: 32,
            meta_enabled: true,
            meta_dim: 4,
            proj_hidden: 32,
            proj_dim: 16,
            pred_hidden: 32,
            base_lr: 0.02,
            ref_batch: 28,
            weight_decay: 0.0,
            augment: AugmentPolicy::identity(),
            mixup_alpha: None,
            contrastive: ContrastiveConfig::default(),
            joint: JointConfig::default(),
            freeze_encoder_finetune: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let stage = |message: String| HarnessError::Stage {
            stage: "config",
            message,
        };
        self.dataset.validate().map_err(|e| stage(e.to_string()))?;
        self.loss.validate().map_err(|e| stage(e.to_string()))?;
        self.augment.validate().map_err(|e| stage(e.to_string()))?;
        self.tta.augment.validate().map_err(|e| stage(e.to_string()))?;
        self.contrastive.validate().map_err(|e| stage(e.to_string()))?;
        self.joint.validate().map_err(|e| stage(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(stage("batch_size must be positive".into()));
        }
        if self.accumulate_steps == 0 {
            return Err(stage("accumulate_steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pseudo_label_fraction) {
            return Err(stage("pseudo_label_fraction must be in [0, 1]".into()));
        }
        if self.tta.num_views == 0 {
            return Err(stage("tta.num_views must be >= 1".into()));
        }
        if let Some(alpha) = self.mixup_alpha {
            if alpha <= 0.0 {
                return Err(stage("mixup_alpha must be positive".into()));
            }
            if !matches!(self.loss, LossChoice::SoftTargetCe) {
                return Err(stage(
                    "mixup pairs with the soft-target loss only".into(),
                ));
            }
        }
        match self.trainer {
            TrainerChoice::Supervised => {
                if self.pretrain_epochs != 0 {
                    return Err(stage(
                        "the supervised trainer takes no pretrain_epochs".into(),
                    ));
                }
            }
            TrainerChoice::MocoThenFinetune | TrainerChoice::SimclrJoint => {
                if self.pretrain_epochs == 0 {
                    return Err(stage(
                        "self-supervised trainers need pretrain_epochs > 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Stage {
            stage: "config",
            message: format!("{}: {e}", path.display()),
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| HarnessError::Stage {
            stage: "config",
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| HarnessError::Stage {
            stage: "config",
            message: e.to_string(),
        })
    }
}
